"""Analytic ray casting against the procedural primitives, ground plane and occluders."""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from libs.schema import OccluderSpec, SceneSpec

EPS = 1e-9

# First-hit categories
OBJECT, GROUND, SKY, OCCLUDER = 0, 1, 2, 3

# Semantic part ids: six box faces, then truck cab and cargo, capsule cap and body, ellipsoid body
BOX_FACES = tuple(range(6))
TRUCK_CAB, TRUCK_CARGO = 6, 7
CAPSULE_CAP, CAPSULE_BODY = 8, 9
ELLIPSOID_BODY = 10
NUM_PARTS = 11

OCCLUDER_COLOR = np.array([1.0, 0.0, 1.0])
SKY_COLOR = np.array([0.62, 0.76, 0.95])
GROUND_COLOR = np.array([0.42, 0.42, 0.40])
LIGHT_DIRECTION = np.array([0.35, 0.25, 1.0]) / np.linalg.norm([0.35, 0.25, 1.0])
AMBIENT = 0.35


@dataclass
class Hits:
    """Nearest intersection per ray; t is inf and part is -1 on misses."""

    t: np.ndarray
    normal: np.ndarray
    part: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "Hits":
        return cls(np.full(n, np.inf), np.zeros((n, 3)), np.full(n, -1, dtype=np.int64))

    def merge(self, other: "Hits") -> "Hits":
        closer = other.t < self.t
        return Hits(
            np.where(closer, other.t, self.t),
            np.where(closer[:, None], other.normal, self.normal),
            np.where(closer, other.part, self.part),
        )


def _safe(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < 1e-12, 1e-12, d)


def intersect_aabb(origins: np.ndarray, directions: np.ndarray, lo, hi, face_parts: Tuple[int, ...] = BOX_FACES) -> Hits:
    """Entry hits of an axis-aligned box seen from outside; part is the face id (axis * 2 + positive side)."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    d = _safe(directions)
    t1, t2 = (lo - origins) / d, (hi - origins) / d
    near, far = np.minimum(t1, t2), np.maximum(t1, t2)
    t_near, t_far = near.max(axis=1), far.min(axis=1)
    hit = (t_far >= t_near) & (t_near > EPS)

    axis = near.argmax(axis=1)
    rows = np.arange(len(axis))
    normal = np.zeros_like(origins)
    normal[rows, axis] = -np.sign(d[rows, axis])
    face = axis * 2 + (normal[rows, axis] > 0)
    part = np.asarray(face_parts)[face] if len(face_parts) == 6 else np.full(len(axis), face_parts[0])
    return Hits(np.where(hit, t_near, np.inf), normal, np.where(hit, part, -1))


def intersect_ellipsoid(origins: np.ndarray, directions: np.ndarray, center, radii, part: int) -> Hits:
    """Entry hits of an axis-aligned ellipsoid."""
    center, radii = np.asarray(center, dtype=np.float64), np.asarray(radii, dtype=np.float64)
    oq, dq = (origins - center) / radii, directions / radii
    a = (dq * dq).sum(axis=1)
    b = 2.0 * (oq * dq).sum(axis=1)
    c = (oq * oq).sum(axis=1) - 1.0
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    hit = (disc >= 0) & (t > EPS)
    t = np.where(hit, t, np.inf)
    q = oq + np.where(hit, t, 0.0)[:, None] * dq
    normal = q / radii
    normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
    return Hits(t, normal, np.where(hit, part, -1))


def intersect_capsule(origins: np.ndarray, directions: np.ndarray, scale) -> Hits:
    """
    Capsule along x filling the box of extents ``scale``.

    A round capsule of radius min(s_y, s_z) / 2 is built in a stretched frame
    and mapped affinely onto the box, so rays keep their parameter t.
    """
    sx, sy, sz = (float(s) for s in scale)
    radius = min(sy, sz, sx) / 2.0
    half = sx / 2.0 - radius
    stretch = np.array([1.0, 2 * radius / sy, 2 * radius / sz])
    o, d = origins * stretch, directions * stretch

    candidates: List[Hits] = []
    a = d[:, 1] ** 2 + d[:, 2] ** 2
    b = 2 * (o[:, 1] * d[:, 1] + o[:, 2] * d[:, 2])
    c = o[:, 1] ** 2 + o[:, 2] ** 2 - radius ** 2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * np.where(a > 1e-18, a, 1e-18))
    x = o[:, 0] + t * d[:, 0]
    hit = (disc >= 0) & (a > 1e-18) & (t > EPS) & (np.abs(x) <= half)
    t = np.where(hit, t, np.inf)
    q = o + np.where(hit, t, 0.0)[:, None] * d
    normal_q = np.stack([np.zeros_like(t), q[:, 1], q[:, 2]], axis=1)
    candidates.append(Hits(t, normal_q, np.where(hit, CAPSULE_BODY, -1)))

    for end in (-half, half):
        cap = intersect_ellipsoid(o, d, (end, 0.0, 0.0), (radius,) * 3, CAPSULE_CAP)
        candidates.append(cap)

    hits = candidates[0]
    for other in candidates[1:]:
        hits = hits.merge(other)
    # Map q-space normals back to the box frame
    normal = hits.normal * stretch
    normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
    return Hits(hits.t, normal, hits.part)


def intersect_object(origins: np.ndarray, directions: np.ndarray, kind: str, scale) -> Hits:
    """First hit with the object of ``kind`` centered in its box."""
    s = np.asarray(scale, dtype=np.float64)
    half = s / 2.0
    if kind == "box":
        return intersect_aabb(origins, directions, -half, half)
    if kind == "truck":
        cargo = intersect_aabb(origins, directions, -half, [0.15 * s[0], half[1], half[2]], (TRUCK_CARGO,))
        cab = intersect_aabb(
            origins, directions, [0.15 * s[0], -half[1], -half[2]], [half[0], half[1], 0.1 * s[2]], (TRUCK_CAB,)
        )
        return cargo.merge(cab)
    if kind == "capsule":
        return intersect_capsule(origins, directions, s)
    return intersect_ellipsoid(origins, directions, np.zeros(3), half, ELLIPSOID_BODY)


def intersect_ground(origins: np.ndarray, directions: np.ndarray, height: float) -> Hits:
    """Hits of the plane z = height seen from above."""
    dz = directions[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - origins[:, 2]) / np.where(dz < 0, dz, -1.0)
    hit = (dz < -1e-12) & (t > EPS)
    normal = np.tile([0.0, 0.0, 1.0], (len(t), 1))
    return Hits(np.where(hit, t, np.inf), normal, np.full(len(t), -1))


def intersect_occluder(origins: np.ndarray, directions: np.ndarray, occluder: OccluderSpec) -> Hits:
    """Hits of a sphere or flat disk occluder."""
    center = np.asarray(occluder.center, dtype=np.float64)
    if occluder.shape == "sphere":
        return intersect_ellipsoid(origins, directions, center, (occluder.radius,) * 3, -1)
    normal = np.asarray(occluder.normal if occluder.normal is not None else (1.0, 0.0, 0.0), dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    denom = directions @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((center - origins) @ normal) / np.where(np.abs(denom) > 1e-12, denom, 1e-12)
    points = origins + t[:, None] * directions
    hit = (np.abs(denom) > 1e-12) & (t > EPS) & (np.linalg.norm(points - center, axis=1) <= occluder.radius)
    return Hits(np.where(hit, t, np.inf), np.tile(normal, (len(t), 1)), np.full(len(t), -1))


@dataclass
class SceneHits:
    """Per-ray first-hit category, distance, normal and object part."""

    category: np.ndarray
    t: np.ndarray
    normal: np.ndarray
    part: np.ndarray
    points: np.ndarray


def cast_scene(
    spec: SceneSpec,
    origins: np.ndarray,
    directions: np.ndarray,
    with_occluders: bool = True,
) -> SceneHits:
    """Resolve the first surface along every ray."""
    obj = intersect_object(origins, directions, spec.object_kind, spec.scale)
    ground = intersect_ground(origins, directions, -spec.scale[2] / 2.0)
    occ = Hits.empty(len(origins))
    if with_occluders:
        for occluder in spec.occluders:
            occ = occ.merge(intersect_occluder(origins, directions, occluder))

    t_all = np.stack([obj.t, ground.t, occ.t], axis=1)
    nearest = t_all.argmin(axis=1)
    t = t_all.min(axis=1)
    category = np.select([~np.isfinite(t), nearest == 0, nearest == 1], [SKY, OBJECT, GROUND], OCCLUDER)
    normal = np.where((category == OBJECT)[:, None], obj.normal, np.where((category == GROUND)[:, None], ground.normal, 0.0))
    part = np.where(category == OBJECT, obj.part, -1)
    finite_t = np.where(np.isfinite(t), t, 0.0)
    return SceneHits(category, t, normal, part, origins + finite_t[:, None] * directions)


def pattern(points: np.ndarray, frequency: float, strength: float, phase: np.ndarray) -> np.ndarray:
    """Procedural albedo modulation in [1 - strength, 1]."""
    wave = np.sin(frequency * points[:, 0] + phase[0]) * np.sin(frequency * points[:, 1] + phase[1])
    wave = wave * np.sin(frequency * points[:, 2] + phase[2])
    return 1.0 - strength * 0.5 * (1.0 + wave)


def shade(spec: SceneSpec, hits: SceneHits, phase: np.ndarray) -> np.ndarray:
    """Flat Lambert shading of every ray's first hit, (P, 3) in [0, 1]."""
    lambert = AMBIENT + (1.0 - AMBIENT) * np.clip(hits.normal @ LIGHT_DIRECTION, 0.0, None)
    albedo = np.asarray(spec.base_color) * pattern(hits.points, spec.pattern_frequency, spec.pattern_strength, phase)[:, None]
    colors = np.empty((len(hits.t), 3))
    colors[:] = SKY_COLOR * spec.brightness
    ground = hits.category == GROUND
    colors[ground] = GROUND_COLOR * lambert[ground, None] * spec.brightness
    obj = hits.category == OBJECT
    colors[obj] = albedo[obj] * lambert[obj, None] * spec.brightness
    colors[hits.category == OCCLUDER] = OCCLUDER_COLOR
    return np.clip(colors, 0.0, 1.0)


def part_features(semantic_dim: int, seed: int = 4321) -> np.ndarray:
    """Fixed feature vector per object part, (NUM_PARTS, semantic_dim)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(NUM_PARTS, semantic_dim))
