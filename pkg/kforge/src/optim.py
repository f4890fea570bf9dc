"""
Adam optimizer and the on-disk checkpoint format
"""

import json
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from kforge.src.exceptions import CheckpointError, ConfigValidationError, NonFiniteError, ShapeError
from kforge.src.tensor import Parameter, Tensor

CHECKPOINT_HEADER = "KFORGE-CKPT-1"
SUPPORTED_DTYPES = ("float32", "float64", "int64")


@dataclass
class AdamState:
    """
    Per-parameter moments plus hyperparameters. Defaults follow the
    adversarial training recipe (alpha=2e-4, beta1=0.5, beta2=0.999).
    """

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: t.Dict[str, np.ndarray] = field(default_factory=dict)
    v: t.Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps"):
            if not float(getattr(self, name)) > 0:
                raise ConfigValidationError(f"Adam hyperparameter '{name}' must be positive")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ConfigValidationError("Adam betas must be below 1")

    @classmethod
    def from_config(cls, config: t.Mapping) -> "AdamState":
        return cls(
            lr=float(config.get("lr", 2e-4)),
            beta1=float(config.get("beta1", 0.5)),
            beta2=float(config.get("beta2", 0.999)),
            eps=float(config.get("eps", 1e-8)),
        )

    def arrays(self, prefix: str) -> t.Dict[str, np.ndarray]:
        """
        Flattens moments and the step counter for a checkpoint
        """
        out = {f"{prefix}.step": np.asarray([self.step], dtype=np.int64)}
        out.update({f"{prefix}.m.{k}": v for k, v in self.m.items()})
        out.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        return out

    def restore(self, arrays: t.Mapping[str, np.ndarray], prefix: str) -> None:
        key = f"{prefix}.step"
        if key not in arrays:
            raise CheckpointError(f"Checkpoint has no optimizer state under '{prefix}'")
        self.step = int(arrays[key][0])
        self.m = {k[len(prefix) + 3 :]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}.m.")}
        self.v = {k[len(prefix) + 3 :]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}.v.")}


def adam_step(
    params: t.Mapping[str, Parameter],
    grads: t.Mapping[str, t.Union[Tensor, np.ndarray]],
    state: AdamState,
) -> AdamState:
    """
    One bias-corrected Adam update. Parameters are updated in place and the
    (mutated) state is returned.

    Args:
        params (t.Mapping[str, Parameter]): Parameters by path
        grads (t.Mapping[str, t.Union[Tensor, np.ndarray]]): Gradients by the same paths
        state (AdamState): Optimizer state

    Raises:
        ShapeError: Gradient and parameter shapes differ, or a gradient has no parameter
        NonFiniteError: A gradient holds NaN/Inf

    Returns:
        AdamState: Updated state with the step counter incremented
    """
    for path in grads:
        if path not in params:
            raise ShapeError(f"Gradient for unknown parameter '{path}'")
    checked: t.Dict[str, np.ndarray] = {}
    for path, g in grads.items():
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != params[path].shape:
            raise ShapeError(f"Gradient shape {g.shape} does not match parameter '{path}' {params[path].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{path}'")
        checked[path] = g

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for path, g in checked.items():
        param = params[path]
        m = state.m.get(path, np.zeros_like(param.data))
        v = state.v.get(path, np.zeros_like(param.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[path], state.v[path] = m, v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.assign(param.data - update)
    return state


def save_checkpoint(stem: t.Union[str, Path], arrays: t.Mapping[str, np.ndarray], metadata: t.Dict) -> Path:
    """
    Writes `<stem>.manifest` (header + one `path  shape  dtype  offset` line per
    array), `<stem>.bin` (little-endian raw values) and `<stem>.json` (metadata)

    Args:
        stem (t.Union[str, Path]): Path without suffix
        arrays (t.Mapping[str, np.ndarray]): Values by unique path
        metadata (t.Dict): JSON-serialisable run state (step, fingerprints)

    Raises:
        CheckpointError: When the files cannot be written

    Returns:
        Path: The manifest path
    """
    stem = Path(stem)
    lines = [CHECKPOINT_HEADER]
    offset = 0
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        with open(stem.with_suffix(".bin"), "wb") as f_out:
            for path in sorted(arrays):
                if "\t" in path or "\n" in path:
                    raise CheckpointError(f"Parameter path '{path}' contains whitespace separators")
                array = np.asarray(arrays[path])
                if array.dtype.name not in SUPPORTED_DTYPES:
                    raise CheckpointError(f"Unsupported dtype {array.dtype} for '{path}'")
                blob = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()
                shape = ",".join(str(n) for n in array.shape)
                lines.append(f"{path}\t{shape}\t{array.dtype.name}\t{offset}")
                f_out.write(blob)
                offset += len(blob)
        stem.with_suffix(".manifest").write_text("\n".join(lines) + "\n")
        stem.with_suffix(".json").write_text(json.dumps(metadata, indent=2, sort_keys=True))
    except OSError as e:
        raise CheckpointError(f"Could not write checkpoint {stem}: {e}") from e
    return stem.with_suffix(".manifest")


def load_checkpoint(stem: t.Union[str, Path]) -> t.Tuple[t.Dict[str, np.ndarray], t.Dict]:
    """
    Reads a checkpoint written by `save_checkpoint`

    Args:
        stem (t.Union[str, Path]): Path with or without the `.manifest` suffix

    Raises:
        CheckpointError: Missing files, wrong header or a truncated blob

    Returns:
        t.Tuple[t.Dict[str, np.ndarray], t.Dict]: Arrays by path and the metadata
    """
    stem = Path(stem)
    if stem.suffix in (".manifest", ".bin", ".json"):
        stem = stem.with_suffix("")
    manifest, blob_path = stem.with_suffix(".manifest"), stem.with_suffix(".bin")
    if not (manifest.is_file() and blob_path.is_file()):
        raise CheckpointError(f"Checkpoint {stem} not found")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise CheckpointError(f"{manifest} does not start with '{CHECKPOINT_HEADER}'")
    blob = blob_path.read_bytes()
    arrays: t.Dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        try:
            path, shape, dtype, offset = line.split("\t")
        except ValueError as e:
            raise CheckpointError(f"Malformed manifest line '{line}'") from e
        extents = tuple(int(n) for n in shape.split(",")) if shape else ()
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(extents)) if extents else 1
        start, stop = int(offset), int(offset) + count * dt.itemsize
        if stop > len(blob):
            raise CheckpointError(f"Blob truncated while reading '{path}'")
        arrays[path] = np.frombuffer(blob[start:stop], dtype=dt).astype(np.dtype(dtype)).reshape(extents)
    metadata_path = stem.with_suffix(".json")
    metadata = json.loads(metadata_path.read_text()) if metadata_path.is_file() else {}
    return arrays, metadata
