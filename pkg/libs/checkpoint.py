"""Single-file checkpoint format with a self-describing named-tensor table."""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from torch import nn

from libs.exceptions import CheckpointError, ConfigurationError
from libs.schema import RUNTIME_FIELDS, PipelineConfig, config_difference

MAGIC = b"GINA"
FORMAT_VERSION = 1

_PREAMBLE = struct.Struct("<4sIQ")

_DTYPES = {
    torch.float16: "<f2",
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int32: "<i4",
    torch.int64: "<i8",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    tensors: Dict[str, torch.Tensor]
    config: Dict[str, Any]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def subset(self, prefix: str) -> Dict[str, torch.Tensor]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        head = f"{prefix}/"
        return {name[len(head):]: t for name, t in self.tensors.items() if name.startswith(head)}


def save_checkpoint(
    path: PathLike,
    tensors: Dict[str, torch.Tensor],
    config: Union[PipelineConfig, Dict[str, Any]],
    metadata: Optional[Dict[str, Any]] = None,
) -> None:
    """
    Write tensors, configuration and metadata to a single file.

    Args:
        path: Destination file
        tensors: Named tensors, written in insertion order
        config: Configuration the tensors were produced with
        metadata: JSON-serializable extras (step counters, optimizer groups)

    Raises:
        CheckpointError: If a tensor dtype is unsupported or the file cannot be written
    """
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, tensor in tensors.items():
        dtype = _DTYPES.get(tensor.dtype)
        if dtype is None:
            raise CheckpointError(f"Unsupported dtype {tensor.dtype} for tensor '{name}'", path=str(path))
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np.dtype(dtype))
        data = array.tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    if isinstance(config, PipelineConfig):
        config = config.model_dump(mode="json")
    header = json.dumps({"config": config, "metadata": metadata or {}, "tensors": entries}).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        with open(tmp_path, "wb") as f:
            f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp_path, path)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint: {e}", path=str(path))


def load_checkpoint(
    path: PathLike,
    expected_config: Optional[PipelineConfig] = None,
    ignore: frozenset = RUNTIME_FIELDS,
) -> Checkpoint:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Args:
        path: Checkpoint file
        expected_config: When given, architecture fields must match
        ignore: Top-level config fields excluded from the comparison

    Returns:
        Decoded checkpoint

    Raises:
        CheckpointError: On bad magic, version mismatch or truncation
        ConfigurationError: If the stored config disagrees with ``expected_config``
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", path=str(path))

    if len(raw) < _PREAMBLE.size:
        raise CheckpointError("Checkpoint is truncated", path=str(path))
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)", path=str(path))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format version {version} does not match supported version {FORMAT_VERSION}",
            path=str(path),
            expected_version=FORMAT_VERSION,
            found_version=version,
        )

    body_start = _PREAMBLE.size + header_len
    if len(raw) < body_start:
        raise CheckpointError("Checkpoint header is truncated", path=str(path))
    try:
        header = json.loads(raw[_PREAMBLE.size:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header: {e}", path=str(path))

    body = memoryview(raw)[body_start:]
    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise CheckpointError(f"Checkpoint is truncated inside tensor '{entry['name']}'", path=str(path))
        dtype = np.dtype(entry["dtype"])
        array = np.frombuffer(body[entry["offset"]:end], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(dtype.newbyteorder("="), copy=True))

    checkpoint = Checkpoint(tensors=tensors, config=header["config"], metadata=header.get("metadata", {}))
    if expected_config is not None:
        difference = config_difference(expected_config, checkpoint.config, ignore=ignore)
        if difference:
            expected = _lookup(expected_config.model_dump(mode="json"), difference)
            found = _lookup(checkpoint.config, difference)
            raise ConfigurationError(
                f"Checkpoint field '{difference}' is {found}, configuration expects {expected}",
                config_key=difference,
            )
    return checkpoint


def _lookup(data: Dict[str, Any], dotted: str) -> Any:
    for part in dotted.split("."):
        if not isinstance(data, dict):
            return None
        data = data.get(part)
    return data


def module_tensors(prefix: str, module: nn.Module) -> Dict[str, torch.Tensor]:
    """State dict entries of ``module`` named ``prefix/<key>``."""
    return {f"{prefix}/{key}": value for key, value in module.state_dict().items()}


def optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer) -> Dict[str, torch.Tensor]:
    """Per-parameter optimizer state as named tensors."""
    tensors = {}
    for index, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            if not torch.is_tensor(value):
                value = torch.tensor(value)
            tensors[f"{prefix}/state/{index}/{key}"] = value
    return tensors


def optimizer_groups(optimizer: torch.optim.Optimizer) -> Any:
    """JSON-serializable param groups."""
    groups = optimizer.state_dict()["param_groups"]
    return json.loads(json.dumps(groups, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def restore_optimizer(
    optimizer: torch.optim.Optimizer,
    checkpoint: Checkpoint,
    prefix: str,
    groups: Any,
) -> None:
    """Load optimizer state saved with :func:`optimizer_tensors`."""
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, tensor in checkpoint.subset(prefix).items():
        _, index, key = name.split("/", 2)
        state.setdefault(int(index), {})[key] = tensor
    for group in groups:
        if "betas" in group:
            group["betas"] = tuple(group["betas"])
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def restore_module(module: nn.Module, checkpoint: Checkpoint, prefix: str) -> None:
    """
    Load module parameters saved with :func:`module_tensors`.

    Raises:
        CheckpointError: If tensors are missing or have unexpected shapes
    """
    try:
        module.load_state_dict(checkpoint.subset(prefix), strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint does not match module '{prefix}': {e}")
