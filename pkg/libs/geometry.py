"""Pinhole camera model and ray utilities in the object frame.

The object frame is z-up with the object's bounding box centered at the
origin. Cameras use the image convention x right, y down, z forward; the
rotation matrix maps camera axes to object axes (its columns are the camera
axes expressed in the object frame) and the translation is the camera center.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from libs.exceptions import RenderError, ValidationError
from libs.schema import CameraRecord

DEFAULT_FOV_DEG = 45.0


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with intrinsics in pixels of a width x height image."""

    focal: Tuple[float, float]
    principal: Tuple[float, float]
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float] = (0.0, 0.0, 0.0),
        fov_deg: float = DEFAULT_FOV_DEG,
        width: int = 64,
        height: int = 64,
        up: Sequence[float] = (0.0, 0.0, 1.0),
    ) -> "Camera":
        """
        Build a camera at ``eye`` looking at ``target``.

        Args:
            eye: Camera center in the object frame
            target: Point on the optical axis
            fov_deg: Horizontal field of view
            width: Image width in pixels
            height: Image height in pixels
            up: World up direction

        Returns:
            Camera instance

        Raises:
            ValidationError: If eye and target coincide
        """
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        distance = np.linalg.norm(forward)
        if not np.isfinite(distance) or distance < 1e-9:
            raise ValidationError("Camera eye coincides with its target", field="radius", value=distance)
        forward /= distance

        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-8:
            # Looking straight along the up axis
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)

        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(
            focal=(focal, focal),
            principal=(width / 2.0, height / 2.0),
            rotation=np.stack([right, down, forward], axis=1),
            translation=eye,
            width=width,
            height=height,
        )

    @classmethod
    def orbit(
        cls,
        azimuth_deg: float,
        elevation_deg: float,
        radius: float,
        fov_deg: float = DEFAULT_FOV_DEG,
        resolution: int = 64,
        target: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> "Camera":
        """Camera on a sphere around ``target`` looking at it."""
        az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
        offset = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        return cls.look_at(np.asarray(target) + offset, target, fov_deg, resolution, resolution)

    def rotated_about_z(self, degrees: float) -> "Camera":
        """Rigidly rotate the camera pose about the object's z axis."""
        a = math.radians(degrees)
        rz = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
        return Camera(self.focal, self.principal, rz @ self.rotation, rz @ self.translation, self.width, self.height)

    def resized(self, width: int, height: Optional[int] = None) -> "Camera":
        """Same camera with intrinsics rescaled to a new image size."""
        height = height or width
        sx, sy = width / self.width, height / self.height
        return Camera(
            focal=(self.focal[0] * sx, self.focal[1] * sy),
            principal=(self.principal[0] * sx, self.principal[1] * sy),
            rotation=self.rotation,
            translation=self.translation,
            width=width,
            height=height,
        )

    def rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Cast one ray through every pixel center, row-major.

        Returns:
            Origins and unit directions, each (height * width, 3) float64

        Raises:
            RenderError: If any ray direction is degenerate
        """
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5, indexing="xy")
        local = np.stack(
            [(u - self.principal[0]) / self.focal[0], (v - self.principal[1]) / self.focal[1], np.ones_like(u)],
            axis=-1,
        ).reshape(-1, 3)
        directions = local @ self.rotation.T
        norms = np.linalg.norm(directions, axis=-1, keepdims=True)
        bad = ~np.isfinite(norms[:, 0]) | (norms[:, 0] == 0.0)
        if bad.any():
            raise RenderError("Degenerate ray direction", ray_index=int(np.argmax(bad)))
        directions = directions / norms
        origins = np.broadcast_to(self.translation, directions.shape).copy()
        return origins, directions

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Project object-frame points to pixel coordinates.

        Returns:
            Pixel coordinates (N, 2) as (u, v) and camera-space depth (N,)
        """
        local = (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation
        z = local[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal[0] * local[:, 0] / z + self.principal[0]
            v = self.focal[1] * local[:, 1] / z + self.principal[1]
        return np.stack([u, v], axis=-1), z

    def validate(self) -> None:
        """
        Check intrinsics and that the rotation is a proper orthonormal matrix.

        Raises:
            ValidationError: If the camera is malformed
        """
        if min(self.focal) <= 0 or not all(math.isfinite(f) for f in self.focal):
            raise ValidationError("Camera focal length must be positive", field="camera.focal", value=self.focal)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValidationError("Camera pose has wrong shape", field="camera.rotation")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise ValidationError("Camera rotation is not orthonormal", field="camera.rotation")
        if not math.isclose(np.linalg.det(self.rotation), 1.0, abs_tol=1e-6):
            raise ValidationError("Camera rotation is not proper", field="camera.rotation")
        if not np.isfinite(self.translation).all():
            raise ValidationError("Camera translation is not finite", field="camera.translation")

    def to_record(self) -> CameraRecord:
        return CameraRecord(
            focal=tuple(float(f) for f in self.focal),
            principal=tuple(float(c) for c in self.principal),
            rotation=tuple(tuple(float(x) for x in row) for row in self.rotation),
            translation=tuple(float(x) for x in self.translation),
            width=self.width,
            height=self.height,
        )

    @classmethod
    def from_record(cls, record: CameraRecord) -> "Camera":
        return cls(
            focal=tuple(record.focal),
            principal=tuple(record.principal),
            rotation=np.asarray(record.rotation, dtype=np.float64),
            translation=np.asarray(record.translation, dtype=np.float64),
            width=record.width,
            height=record.height,
        )


def circumradius(scale: Sequence[float]) -> float:
    """Radius of the sphere enclosing a centered box of the given extents."""
    return 0.5 * float(np.linalg.norm(np.asarray(scale, dtype=np.float64)))


def box_extent(scale: Sequence[float], scaled_box: bool = True) -> np.ndarray:
    """
    Extents of the box the tri-plane spans.

    With the scaled box the planes follow the object's extents; otherwise a
    cube with the longest extent as its side.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if scaled_box:
        return scale.copy()
    return np.full(3, scale.max())


def sincos_encoding(values: Sequence[float], degrees: int = 6) -> np.ndarray:
    """
    Sine/cosine encoding of each component at frequencies 2^0 .. 2^(degrees-1).

    Layout is per component, per frequency, (sin, cos), so three components at
    degree 6 give 36 values.
    """
    values = np.asarray(values, dtype=np.float64)
    frequencies = 2.0 ** np.arange(degrees)
    angles = values[..., :, None] * frequencies
    encoded = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    return encoded.reshape(*values.shape[:-1], -1)
