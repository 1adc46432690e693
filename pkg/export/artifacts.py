"""Generated sample folders and the run directory convention."""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from PIL import Image

from libs.dataset import read_raster, write_raster
from libs.exceptions import DatasetError
from libs.schema import SampleMeta

PathLike = Union[str, Path]

CKPT_DIR = "ckpt"
SAMPLES_DIR = "samples"
MESHES_DIR = "meshes"
REPORTS_DIR = "reports"
STAGE1_CKPT = "stage1.gina"
STAGE2_CKPT = "stage2.gina"
RUN_RECORD = "run.json"


@dataclass
class RunLayout:
    """Paths of runs/<name>/{ckpt,samples,meshes,reports,run.json}."""

    root: Path

    @property
    def ckpt(self) -> Path:
        return self.root / CKPT_DIR

    @property
    def samples(self) -> Path:
        return self.root / SAMPLES_DIR

    @property
    def meshes(self) -> Path:
        return self.root / MESHES_DIR

    @property
    def reports(self) -> Path:
        return self.root / REPORTS_DIR

    @property
    def record(self) -> Path:
        return self.root / RUN_RECORD

    @property
    def stage1(self) -> Path:
        return self.ckpt / STAGE1_CKPT

    @property
    def stage2(self) -> Path:
        return self.ckpt / STAGE2_CKPT

    def is_run(self) -> bool:
        return self.samples.is_dir()

    def create(self) -> "RunLayout":
        for directory in (self.ckpt, self.samples, self.meshes, self.reports):
            directory.mkdir(parents=True, exist_ok=True)
        return self


@dataclass(eq=False)
class GeneratedSample:
    """One synthesized asset: its preview render, token grid and metadata."""

    sample_id: str
    image: np.ndarray
    alpha: np.ndarray
    tokens: np.ndarray
    meta: SampleMeta
    depth: Optional[np.ndarray] = None
    turntable: Optional[np.ndarray] = None


def _to_uint8(array: np.ndarray) -> np.ndarray:
    return np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_generated(sample: GeneratedSample, directory: PathLike) -> Path:
    """Write image.png, alpha.png, depth.bin, tokens.npy, meta.json and turntable.png."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(sample.image)).save(directory / "image.png")
    Image.fromarray(_to_uint8(sample.alpha)).save(directory / "alpha.png")
    np.save(directory / "tokens.npy", np.asarray(sample.tokens, dtype=np.int64))
    (directory / "meta.json").write_text(json.dumps(sample.meta.model_dump(mode="json"), indent=2, sort_keys=True))
    if sample.depth is not None:
        write_raster(directory / "depth.bin", sample.depth)
    if sample.turntable is not None:
        Image.fromarray(_to_uint8(sample.turntable)).save(directory / "turntable.png")
    return directory


def load_generated(directory: PathLike) -> GeneratedSample:
    """
    Read a folder written by :func:`save_generated`.

    Raises:
        DatasetError: If a required file is missing or unreadable
    """
    directory = Path(directory)
    try:
        meta = SampleMeta.model_validate_json((directory / "meta.json").read_text())
        image = np.asarray(Image.open(directory / "image.png").convert("RGB"), dtype=np.float64) / 255.0
        alpha = np.asarray(Image.open(directory / "alpha.png").convert("L"), dtype=np.float64) / 255.0
        tokens = np.load(directory / "tokens.npy")
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read generated sample: {e}", sample_id=directory.name, path=str(directory))
    depth = read_raster(directory / "depth.bin") if (directory / "depth.bin").is_file() else None
    return GeneratedSample(directory.name, image, alpha, tokens, meta, depth)


def generated_directories(samples_dir: PathLike) -> List[Path]:
    samples_dir = Path(samples_dir)
    if not samples_dir.is_dir():
        return []
    return sorted(p for p in samples_dir.iterdir() if p.is_dir() and (p / "meta.json").is_file())
