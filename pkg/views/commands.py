"""Subcommand handlers; each resolves its inputs, delegates and records the run."""

import json
import sys
from argparse import Namespace
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from loguru import logger

from export.artifacts import GeneratedSample, RunLayout, save_generated
from export.gallery import TURNTABLE_ELEVATION, TURNTABLE_RADIUS, gallery, render_turntable
from export.io import export_asset
from export.mesh import extract_mesh
from libs.dataset import ObjectSample, load_dataset, load_sample
from libs.exceptions import DatasetError, ValidationError
from libs.geometry import Camera, box_extent, circumradius
from libs.schema import ConditionSpec, PipelineConfig, RunRecord, SampleMeta
from metrics.evaluate import evaluate
from synthetic.generator import generate_dataset
from training.stage1 import GinaAutoencoder, Stage1State, fit_stage1, reconstruct, render_view
from training.stage2 import (
    Stage2State,
    check_vocabulary,
    dataset_conditions,
    encode_condition,
    extract_tokens,
    fit_stage2,
    sample,
    unflatten,
    vary,
)

PREVIEW_AZIMUTH = 30.0
RECONSTRUCTION_SCALE = 1e-2


def write_run_record(
    directory: Path,
    args: Namespace,
    config: PipelineConfig,
    argv: Sequence[str],
    timestamped: bool = True,
) -> Path:
    """Write run.json with the command line, seed and resolved configuration."""
    directory.mkdir(parents=True, exist_ok=True)
    record = RunRecord(
        command=args.command,
        argv=list(argv),
        seed=config.seed,
        preset=getattr(args, "preset", None) or "desk",
        config=config.model_dump(mode="json"),
        created_at=datetime.now() if timestamped else None,
    )
    path = directory / "run.json"
    path.write_text(json.dumps(record.model_dump(mode="json"), indent=2))
    return path


def _load_samples(path: str) -> List[ObjectSample]:
    dataset = load_dataset(path)
    if len(dataset) == 0:
        raise DatasetError("Dataset holds no valid samples", path=str(path))
    return dataset.samples


def preview_camera(extent: np.ndarray, resolution: int) -> Camera:
    return Camera.orbit(PREVIEW_AZIMUTH, TURNTABLE_ELEVATION, TURNTABLE_RADIUS * circumradius(extent), resolution=resolution)


def write_asset(
    model: GinaAutoencoder,
    config: PipelineConfig,
    grid: torch.Tensor,
    scale: Sequence[float],
    meta: SampleMeta,
    directory: Path,
    resolution: Optional[int] = None,
    camera: Optional[Camera] = None,
    mesh_path: Optional[Path] = None,
) -> None:
    """Render, turntable and optionally mesh one decoded token grid (N_Z, N_Z, 3)."""
    resolution = resolution or config.render_resolution
    extent = box_extent(scale, config.scaled_box)
    camera = (camera or preview_camera(extent, resolution)).resized(resolution)
    out = render_view(model, grid, camera, extent, config, resolution)
    alpha = out.alpha.double().numpy()
    image = out.rgb.double().numpy() + (1.0 - alpha)[..., None]

    with torch.no_grad():
        field = model.decoder.field(model.decode_tokens(grid[None])[0], extent)
        turntable = render_turntable(field, extent, resolution, config.samples_uniform, config.samples_importance)
        if mesh_path is not None:
            export_asset(extract_mesh(field, extent, config.mesh_resolution, config.density_threshold), mesh_path)

    meta = meta.model_copy(update={"camera": camera.to_record(), "scale": tuple(float(s) for s in scale)})
    save_generated(
        GeneratedSample(
            sample_id=meta.sample_id,
            image=image,
            alpha=alpha,
            tokens=grid.numpy(),
            meta=meta,
            depth=out.depth.double().numpy(),
            turntable=turntable,
        ),
        directory / meta.sample_id,
    )


def data_gen(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    out = generate_dataset(
        args.n,
        config,
        config.seed,
        args.out,
        occlusion_prob=args.occlusion_prob,
        min_visibility=args.min_visibility,
    )
    # regenerated datasets stay byte-identical, run.json included
    write_run_record(out, args, config, argv, timestamped=False)
    return 0


def train_stage1(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    samples = _load_samples(args.data)
    layout = RunLayout(Path(args.out)).create()
    state = Stage1State.load(args.resume, config) if args.resume else Stage1State.create(config)
    reports = fit_stage1(state, samples, args.steps, seed=config.seed)
    state.save(layout.stage1)
    losses = [r.model_dump(mode="json") for r in reports]
    (layout.reports / "stage1_losses.json").write_text(json.dumps(losses, indent=2))
    write_run_record(layout.root, args, config, argv)
    return 0


def train_stage2(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    stage1 = Stage1State.load(args.stage1)
    samples = _load_samples(args.data)
    layout = RunLayout(Path(args.out)).create()
    state = Stage2State.create(config, args.condition)
    check_vocabulary(stage1, state)
    tokens = extract_tokens(stage1, samples)
    conditions = dataset_conditions(samples, args.condition, config)
    losses = fit_stage2(state, tokens, conditions, args.steps, seed=config.seed)
    state.save(layout.stage2)
    (layout.reports / "stage2_losses.json").write_text(json.dumps(losses))
    write_run_record(layout.root, args, config, argv)
    return 0


def parse_condition(raw: Optional[str]) -> ConditionSpec:
    """ConditionSpec from inline JSON or from a JSON file path."""
    if not raw:
        return ConditionSpec()
    path = Path(raw)
    text = path.read_text() if path.is_file() else raw
    try:
        return ConditionSpec.model_validate_json(text)
    except ValueError as e:
        raise ValidationError(f"Invalid condition: {e}", field="condition")


def asset_scale(spec: ConditionSpec, stage1: Stage1State) -> List[float]:
    """Box extents of a synthesized asset: a 3-vector condition, the source sample's, or the training mean."""
    if spec.kind == "continuous" and spec.continuous_vector is not None and len(spec.continuous_vector) == 3:
        return list(spec.continuous_vector)
    if spec.kind == "image":
        return load_sample(spec.source_image).scale.tolist()
    return list(stage1.mean_scale or (1.0, 1.0, 1.0))


def sample_cmd(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    stage1 = Stage1State.load(args.stage1)
    stage2 = Stage2State.load(args.stage2)
    check_vocabulary(stage1, stage2)
    spec = parse_condition(args.condition_json)
    payload = encode_condition(spec, stage2.condition_kind, stage2.config)
    s1 = stage1.config
    tokens = sample(
        stage2,
        args.n,
        args.steps or s1.decode_steps,
        condition=payload,
        seed=config.seed,
        temperature=args.temperature,
    )

    layout = RunLayout(Path(args.out)).create()
    scale = asset_scale(spec, stage1)
    label = int(payload.value) if payload.mode == "discrete" else 0
    class_label = label if stage2.condition_kind == "class" else 0
    time_of_day = label if stage2.condition_kind == "time" else 0
    model = stage1.ema.eval()
    for index, sequence in enumerate(tokens):
        grid = unflatten(sequence, s1.latent_grid, s1.codebook_size)
        meta = SampleMeta(
            sample_id=f"{index:06d}",
            camera=preview_camera(np.asarray(scale), args.resolution or s1.render_resolution).to_record(),
            scale=tuple(scale),
            class_label=class_label,
            time_of_day=time_of_day,
        )
        write_asset(
            model, s1, grid, scale, meta, layout.samples, args.resolution, mesh_path=layout.meshes / f"{meta.sample_id}.obj"
        )
    logger.info("Sampled {} assets into {}", args.n, layout.root)
    write_run_record(layout.root, args, config, argv)
    return 0


def reconstruct_cmd(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    state = Stage1State.load(args.ckpt)
    samples = _load_samples(args.data)
    layout = RunLayout(Path(args.out)).create()
    results = reconstruct(state, samples)
    rows = []
    for sample_, result in zip(samples, results):
        camera = sample_.camera.resized(state.config.render_resolution)
        meta = sample_.to_meta().model_copy(update={"camera": camera.to_record(), "has_depth": False, "has_semantic": False})
        save_generated(
            GeneratedSample(
                sample_id=result.sample_id,
                image=result.rgb + (1.0 - result.alpha)[..., None],
                alpha=result.alpha,
                tokens=result.tokens,
                meta=meta,
            ),
            layout.samples / result.sample_id,
        )
        rows.append({"sample_id": result.sample_id, "l2": result.l2 / RECONSTRUCTION_SCALE, "psnr": result.psnr})
    finite = [r for r in rows if np.isfinite(r["l2"])]
    summary = {
        "l2_e-2": float(np.mean([r["l2"] for r in finite])) if finite else None,
        "psnr": float(np.mean([r["psnr"] for r in finite if np.isfinite(r["psnr"])])) if finite else None,
        "samples": rows,
    }
    (layout.reports / "reconstruction.json").write_text(json.dumps(summary, indent=2))
    logger.info("Reconstruction l2 {} (x1e-2), psnr {}", summary["l2_e-2"], summary["psnr"])
    write_run_record(layout.root, args, state.config, argv)
    return 0


def vary_cmd(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    stage1 = Stage1State.load(args.stage1)
    stage2 = Stage2State.load(args.stage2)
    samples = _load_samples(args.data)
    if not 0 <= args.index < len(samples):
        raise ValidationError(f"Sample index {args.index} outside the dataset", field="index", value=args.index)
    source = samples[args.index]
    sequences = vary(stage1, stage2, source, args.mask_ratio, config.seed, n=args.n, steps=args.steps)

    s1 = stage1.config
    layout = RunLayout(Path(args.out)).create()
    model = stage1.ema.eval()
    for index, sequence in enumerate(sequences):
        meta = source.to_meta().model_copy(
            update={"sample_id": f"{index:06d}", "has_depth": False, "has_semantic": False}
        )
        grid = unflatten(sequence, s1.latent_grid, s1.codebook_size)
        write_asset(
            model,
            s1,
            grid,
            source.scale.tolist(),
            meta,
            layout.samples,
            camera=source.camera,
            mesh_path=layout.meshes / f"{meta.sample_id}.obj",
        )
    write_run_record(layout.root, args, config, argv)
    return 0


def load_token_grid(path: Path, config: PipelineConfig) -> torch.Tensor:
    """Token grid (N_Z, N_Z, 3) from a tokens.npy holding a grid or a flat sequence."""
    tokens = torch.from_numpy(np.load(path)).long()
    if tokens.ndim == 1:
        return unflatten(tokens, config.latent_grid, config.codebook_size)
    expected = (config.latent_grid, config.latent_grid, 3)
    if tuple(tokens.shape) != expected:
        raise ValidationError(f"Token grid must be {expected}", field="tokens", value=tuple(tokens.shape))
    if tokens.min() < 0 or tokens.max() >= config.codebook_size:
        raise ValidationError("Token grid holds ids outside the codebook", field="tokens")
    return tokens


def mesh_cmd(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    state = Stage1State.load(args.ckpt)
    s1 = state.config
    tokens_path = Path(args.tokens)
    grid = load_token_grid(tokens_path, s1)
    if args.scale:
        scale = list(args.scale)
    elif (tokens_path.parent / "meta.json").is_file():
        scale = list(SampleMeta.model_validate_json((tokens_path.parent / "meta.json").read_text()).scale)
    else:
        scale = list(state.mean_scale or (1.0, 1.0, 1.0))

    extent = box_extent(scale, s1.scaled_box)
    model = state.ema.eval()
    with torch.no_grad():
        field = model.decoder.field(model.decode_tokens(grid[None])[0], extent)
        mesh = extract_mesh(
            field,
            extent,
            resolution=args.res or s1.mesh_resolution,
            threshold=s1.density_threshold if args.threshold is None else args.threshold,
            with_colors=args.color,
        )
    out = export_asset(mesh, args.out)
    write_run_record(out.parent, args, s1, argv)
    return 0


def eval_cmd(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    report = evaluate(args.generated, args.validation, checkpoint=args.ckpt, seed=config.seed)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2))
    sys.stdout.write(report.to_table() + "\n")
    if report.missing:
        sys.stdout.write("missing: " + ", ".join(report.missing) + "\n")
    write_run_record(path.parent, args, config, argv)
    return 0


def gallery_cmd(args: Namespace, config: PipelineConfig, argv: Sequence[str]) -> int:
    gallery_path, _ = gallery(args.samples, args.out)
    write_run_record(gallery_path.parent, args, config, argv)
    return 0
