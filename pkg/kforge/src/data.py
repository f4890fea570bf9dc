"""
This script contains all the data utility functions: skeleton file parsing,
sequence normalisation, the synthetic datasets, manifests and the sequence
JSON format.
"""

import hashlib
import json
import os
import re
import typing as t
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import multiprocess as mp
import numpy as np
import pandera as pa
import polars as pl
import pydantic
from box import Box
from prefect.logging import get_logger
from sklearn.model_selection import train_test_split
from kforge.src.exceptions import (
    ConfigValidationError,
    DatasetError,
    GraphDefinitionError,
    SequenceSchemaError,
    ShapeError,
    SkeletonParseError,
)
from kforge.src.graph import load_pyramid, load_pyramid_table, temporal_resample
from kforge.src.tensor import RandomStreams, get_default_dtype

logger = get_logger("kforge.data")

NTU_JOINTS = 25
NORMALIZE_MODES = ("global3d", "local2d")
SPLIT_TAGS = ("train", "eval")
ACTION_TOKEN = re.compile(r"A(\d{3})")


def thread_limit() -> int:
    """
    Worker cap from `KFORGE_THREADS`, defaulting to the CPU count
    """
    value = os.environ.get("KFORGE_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(value))
    except ValueError as e:
        raise ConfigValidationError(f"KFORGE_THREADS must be an integer, got '{value}'") from e


@dataclass
class MotionSample:
    """
    One skeleton sequence

    Args:
        data (np.ndarray): Coordinates [C, T, N]
        label (int): Class id
        skeleton (str): Skeleton (pyramid table) name
        provenance (str): Source file or synthesis seed
        frequency (t.Optional[float]): Oscillation frequency of synthetic samples
    """

    data: np.ndarray
    label: int
    skeleton: str
    provenance: str = ""
    frequency: t.Optional[float] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"Motion samples are [C, T, N], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError(f"Sample from '{self.provenance}' holds non-finite coordinates")
        self.label = int(self.label)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def joints(self) -> int:
        return self.data.shape[2]


# Skeleton text files
def action_label(path: t.Union[str, Path]) -> t.Optional[int]:
    """
    Zero-based action id from the `A###` token of an NTU-style file name
    """
    match = ACTION_TOKEN.search(Path(path).name)
    return int(match.group(1)) - 1 if match else None


def parse_skeleton_file(path: t.Union[str, Path], skeleton: str = "ntu25") -> t.List[MotionSample]:
    """
    Reads an NTU-style skeleton text file. Each body becomes its own sample;
    only the first three fields (x y z) of every joint line are used.

    Args:
        path (t.Union[str, Path]): Skeleton text file
        skeleton (str): Skeleton name stored on the samples

    Raises:
        SkeletonParseError: Malformed header, wrong joint count or a truncated frame block

    Returns:
        t.List[MotionSample]: One sample per body, in order of first appearance
    """
    path = Path(path)
    lines = [line.strip() for line in path.read_text().splitlines()]
    lines = [line for line in lines if line]
    cursor = 0

    def _next(frame: t.Optional[int], what: str) -> str:
        nonlocal cursor
        if cursor >= len(lines):
            raise SkeletonParseError(f"file ends while reading {what}", frame)
        cursor += 1
        return lines[cursor - 1]

    def _count(text: str, frame: t.Optional[int], what: str) -> int:
        try:
            value = int(text.split()[0])
        except (ValueError, IndexError) as e:
            raise SkeletonParseError(f"expected an integer {what}, got '{text}'", frame) from e
        if value < 0:
            raise SkeletonParseError(f"negative {what} {value}", frame)
        return value

    if not lines:
        raise SkeletonParseError(f"{path.name} is empty, expected a frame count header")
    num_frames = _count(_next(None, "the frame count"), None, "frame count")
    bodies: t.Dict[str, t.List[np.ndarray]] = {}
    for frame in range(num_frames):
        num_bodies = _count(_next(frame, "the body count"), frame, "body count")
        for body in range(num_bodies):
            metadata = _next(frame, "body metadata").split()
            body_id = metadata[0] if metadata else str(body)
            num_joints = _count(_next(frame, "the joint count"), frame, "joint count")
            if num_joints != NTU_JOINTS:
                raise SkeletonParseError(f"body {body} lists {num_joints} joints, expected {NTU_JOINTS}", frame)
            coordinates = np.empty((NTU_JOINTS, 3), dtype=np.float64)
            for joint in range(NTU_JOINTS):
                fields = _next(frame, f"joint {joint}").split()
                try:
                    coordinates[joint] = [float(v) for v in fields[:3]]
                    if len(fields) < 3:
                        raise ValueError
                except ValueError as e:
                    raise SkeletonParseError(
                        f"joint {joint} of body {body} needs x y z values, got '{' '.join(fields)}'", frame
                    ) from e
            bodies.setdefault(body_id, []).append(coordinates)

    label = action_label(path)
    return [
        MotionSample(
            data=np.stack(frames).transpose(2, 0, 1),
            label=label if label is not None else 0,
            skeleton=skeleton,
            provenance=f"{path}#{body_id}",
        )
        for body_id, frames in bodies.items()
    ]


# Normalisation
def normalize_sequence(
    sample: MotionSample,
    target_frames: int,
    mode: str = "global3d",
    root: t.Optional[int] = None,
) -> MotionSample:
    """
    Resamples to `target_frames`. `global3d` keeps world coordinates;
    `local2d` drops the depth axis and moves the root joint to the origin in
    every frame. Both modes are idempotent.

    Args:
        sample (MotionSample): Input sequence
        target_frames (int): Frames after resampling
        mode (str): `global3d` or `local2d`
        root (t.Optional[int]): Anchor joint, defaults to the skeleton table's root

    Raises:
        ConfigValidationError: Unknown mode
        ShapeError: Fewer than two frames, or a 2D sample asked for `global3d`

    Returns:
        MotionSample: Normalised copy
    """
    if mode not in NORMALIZE_MODES:
        raise ConfigValidationError(f"Unknown normalisation mode '{mode}'. Choose one of {NORMALIZE_MODES}")
    if sample.frames < 2:
        raise ShapeError(f"Normalisation needs at least 2 frames, '{sample.provenance}' has {sample.frames}")
    data = sample.data
    if mode == "global3d":
        if sample.channels != 3:
            raise ShapeError(f"global3d needs 3D coordinates, got {sample.channels} channels")
    else:
        if root is None:
            root = load_pyramid_table(sample.skeleton).root_joint
        data = data[:2]
        data = data - data[:, :, root : root + 1]
    return MotionSample(
        data=temporal_resample(data, target_frames),
        label=sample.label,
        skeleton=sample.skeleton,
        provenance=sample.provenance,
        frequency=sample.frequency,
    )


# Synthetic data
@dataclass
class SynthMotionConfig:
    """
    Parametric motion classes: every limb oscillates with a frequency drawn
    from its class band (cycles per sequence), plus limb-specific amplitude,
    phase and direction. Bands must not overlap.
    """

    skeleton: str = "h36m15"
    frames: int = 32
    samples_per_class: int = 200
    bands: t.Tuple[t.Tuple[float, float], ...] = ((1.0, 1.3), (2.7, 3.3), (4.7, 5.3), (6.7, 7.3))
    amplitude: t.Tuple[float, float] = (0.05, 0.15)
    noise: float = 0.0
    seed: int = 7

    def __post_init__(self):
        self.bands = tuple(tuple(float(v) for v in band) for band in self.bands)
        self.amplitude = tuple(float(v) for v in self.amplitude)
        if self.frames < 2 or self.samples_per_class < 1:
            raise ConfigValidationError("Synthetic datasets need frames >= 2 and samples_per_class >= 1")
        if self.noise < 0:
            raise ConfigValidationError("Synthetic noise level must be non-negative")
        for low, high in self.bands:
            if not 0 < low <= high < self.frames / 2:
                raise ConfigValidationError(f"Band ({low}, {high}) must lie inside (0, {self.frames / 2})")
        ordered = sorted(self.bands)
        for (_, high), (low, _) in zip(ordered, ordered[1:]):
            if low <= high:
                raise ConfigValidationError(f"Class frequency bands overlap at {low}")

    @property
    def num_classes(self) -> int:
        return len(self.bands)


def _limb_layout(skeleton: str) -> t.Tuple[np.ndarray, np.ndarray]:
    """
    Limb id (the root's neighbour on the path to each joint, -1 for the root)
    and depth scale hop/max_hop per joint
    """
    spec = load_pyramid(skeleton).finest.spec
    adjacency = spec.adjacency()
    limb = np.full(spec.num_joints, -1)
    hops = np.zeros(spec.num_joints)
    queue = [spec.root]
    seen = {spec.root}
    while queue:
        joint = queue.pop(0)
        for neighbour in np.flatnonzero(adjacency[joint]):
            if neighbour in seen:
                continue
            seen.add(neighbour)
            limb[neighbour] = neighbour if joint == spec.root else limb[joint]
            hops[neighbour] = hops[joint] + 1
            queue.append(neighbour)
    return limb, hops / max(hops.max(), 1.0)


def synthesize_sample(config: SynthMotionConfig, label: int, index: int) -> MotionSample:
    """
    Deterministic sample `index` of class `label`
    """
    rest = load_pyramid(config.skeleton).rest_pose
    if rest is None:
        raise GraphDefinitionError(f"Skeleton '{config.skeleton}' has no rest pose for synthesis")
    limb, depth = _limb_layout(config.skeleton)
    rng = RandomStreams(config.seed).generator("synthetic", index)
    low, high = config.bands[label]
    frequency = rng.uniform(low, high)
    limbs = np.unique(limb[limb >= 0])
    amplitudes = dict(zip(limbs, rng.uniform(*config.amplitude, size=len(limbs))))
    phases = dict(zip(limbs, rng.uniform(0.0, 2 * np.pi, size=len(limbs))))
    directions = rng.standard_normal((len(limbs), 3))
    directions = dict(zip(limbs, directions / np.linalg.norm(directions, axis=1, keepdims=True)))

    time = np.arange(config.frames) / config.frames
    data = np.repeat(rest.T[:, None, :], config.frames, axis=1)
    for j in np.flatnonzero(limb >= 0):
        wave = np.sin(2 * np.pi * frequency * time + phases[limb[j]])
        data[:, :, j] += amplitudes[limb[j]] * depth[j] * directions[limb[j]][:, None] * wave[None, :]
    if config.noise > 0:
        data = data + config.noise * rng.standard_normal(data.shape)
    return MotionSample(
        data=data,
        label=label,
        skeleton=config.skeleton,
        provenance=f"synthetic:{config.seed}:{index}",
        frequency=float(frequency),
    )


def frequency_grid(frames: int, step: float = 0.01) -> np.ndarray:
    hundredths = int(round(1 / step))
    start, stop = int(0.25 * hundredths), int((frames / 2 - 0.25) * hundredths)
    return np.arange(start, stop + 1) / hundredths


def spectral_frequency(sequence: np.ndarray, grid: t.Optional[np.ndarray] = None) -> float:
    """
    Dominant oscillation frequency (cycles per sequence) shared by all joint
    trajectories: the grid frequency whose offset + cosine + sine least-squares
    fit explains the most energy
    """
    sequence = np.asarray(sequence, dtype=np.float64)
    frames = sequence.shape[1]
    grid = frequency_grid(frames) if grid is None else grid
    time = np.arange(frames) / frames
    phase = 2 * np.pi * grid[:, None] * time[None, :]
    basis = np.stack([np.ones_like(phase), np.cos(phase), np.sin(phase)], axis=-1)
    Q, _ = np.linalg.qr(basis)
    signals = sequence.transpose(1, 0, 2).reshape(frames, -1)
    explained = np.sum(np.einsum("ftk,ts->fks", Q, signals) ** 2, axis=(1, 2))
    return float(grid[int(np.argmax(explained))])


def spectral_oracle(sequences: np.ndarray, bands: t.Sequence[t.Tuple[float, float]]) -> np.ndarray:
    """
    Classifies sequences [M, C, T, N] by the band nearest to their dominant frequency
    """
    sequences = np.asarray(sequences)
    grid = frequency_grid(sequences.shape[2])
    predictions = []
    for sequence in sequences:
        f = spectral_frequency(sequence, grid)
        distances = [max(low - f, 0.0, f - high) for low, high in bands]
        predictions.append(int(np.argmin(distances)))
    return np.asarray(predictions, dtype=np.int64)


# Manifest
ManifestSchema = pa.DataFrameSchema(
    columns={
        "sample_id": pa.Column(dtype="object", nullable=False, unique=True, required=True),
        "label": pa.Column(dtype="int64", checks=[pa.Check.greater_than_or_equal_to(0)], nullable=False),
        "split": pa.Column(dtype="object", checks=[pa.Check.isin(list(SPLIT_TAGS))], nullable=False),
        "provenance": pa.Column(dtype="object", nullable=False),
        "frames": pa.Column(dtype="int64", checks=[pa.Check.greater_than(0)]),
        "joints": pa.Column(dtype="int64", checks=[pa.Check.greater_than(0)]),
        "channels": pa.Column(dtype="int64", checks=[pa.Check.isin([2, 3])]),
        "frequency": pa.Column(dtype="float64", nullable=True, required=False),
    },
    checks=[
        pa.Check(
            lambda df: sorted(set(df["label"])) == list(range(int(df["label"].max()) + 1)),
            error="class ids must be contiguous from 0",
        )
    ],
    coerce=True,
    strict=False,
)


@dataclass(frozen=True)
class MotionDataset:
    X: t.Annotated[np.ndarray, "Sequences [M, C, T, N]"]
    labels: t.Annotated[np.ndarray, "Class ids [M]"]
    skeleton: str
    manifest: pl.DataFrame
    settings: t.Dict[str, t.Any] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def class_histogram(self) -> t.Dict[int, int]:
        counts = self.manifest.group_by("label").len().sort("label")
        return dict(zip(counts["label"].to_list(), counts["len"].to_list()))

    def subset(self, split: str) -> t.Tuple[np.ndarray, np.ndarray]:
        mask = (self.manifest["split"] == split).to_numpy()
        return self.X[mask], self.labels[mask]

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.manifest.write_csv().encode())
        digest.update(np.ascontiguousarray(self.X).tobytes())
        digest.update(np.ascontiguousarray(self.labels).tobytes())
        digest.update(json.dumps(self.settings, sort_keys=True).encode())
        return digest.hexdigest()


# Sequence JSON files
class SequenceFile(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid")

    skeleton: str
    channels: pydantic.PositiveInt
    frames: pydantic.PositiveInt
    joints: pydantic.PositiveInt
    label: pydantic.NonNegativeInt
    data: t.List[t.List[t.List[float]]]

    @pydantic.model_validator(mode="after")
    def _check_extents(self) -> "SequenceFile":
        if len(self.data) != self.channels:
            raise ValueError("data: outer length must equal channels")
        for channel in self.data:
            if len(channel) != self.frames or any(len(frame) != self.joints for frame in channel):
                raise ValueError("data: extents must match [channels][frames][joints]")
        return self


def export_sequence(sample: MotionSample, path: t.Union[str, Path]) -> Path:
    """
    Writes a sample as sequence JSON; floats keep their full repr precision

    Raises:
        SequenceSchemaError: Sample without frames
    """
    if sample.frames == 0:
        raise SequenceSchemaError("sequences without frames cannot be exported", "frames")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "skeleton": sample.skeleton,
        "channels": sample.channels,
        "frames": sample.frames,
        "joints": sample.joints,
        "label": sample.label,
        "data": sample.data.tolist(),
    }
    path.write_text(json.dumps(payload))
    return path


def import_sequence(path: t.Union[str, Path]) -> MotionSample:
    """
    Reads and validates a sequence JSON file

    Raises:
        SequenceSchemaError: Schema violation, with the offending field name
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SequenceSchemaError(f"{path} is not valid JSON: {e}") from e
    try:
        sequence = SequenceFile.model_validate(payload)
    except pydantic.ValidationError as e:
        error = e.errors()[0]
        field_name = str(error["loc"][0]) if error["loc"] else str(error["msg"]).split(":")[0].split()[-1]
        raise SequenceSchemaError(error["msg"], field_name) from e
    try:
        expected = load_pyramid(sequence.skeleton).finest.size
    except GraphDefinitionError as e:
        raise SequenceSchemaError(str(e), "skeleton") from e
    if sequence.joints != expected:
        raise SequenceSchemaError(f"{sequence.joints} joints but skeleton '{sequence.skeleton}' has {expected}", "joints")
    return MotionSample(data=np.asarray(sequence.data), label=sequence.label, skeleton=sequence.skeleton, provenance=str(path))


# Loading strategies
class BaseDataLoaderStrategy(ABC):
    """
    Base class for data loading strategies
    """

    @abstractmethod
    def __call__(self) -> t.List[MotionSample]:
        """
        Load samples
        """


@dataclass
class SyntheticDataLoaderStrategy(BaseDataLoaderStrategy):
    """
    Parametric limb-oscillation dataset, see `SynthMotionConfig`
    """

    skeleton: str = "h36m15"
    frames: int = 32
    samples_per_class: int = 200
    bands: t.Sequence[t.Sequence[float]] = ((1.0, 1.3), (2.7, 3.3), (4.7, 5.3), (6.7, 7.3))
    amplitude: t.Sequence[float] = (0.05, 0.15)
    noise: float = 0.0
    seed: int = 7

    @property
    def config(self) -> SynthMotionConfig:
        return SynthMotionConfig(
            skeleton=self.skeleton,
            frames=self.frames,
            samples_per_class=self.samples_per_class,
            bands=tuple(tuple(b) for b in self.bands),
            amplitude=tuple(self.amplitude),
            noise=self.noise,
            seed=self.seed,
        )

    def __call__(self) -> t.List[MotionSample]:
        config = self.config
        samples = []
        for label in range(config.num_classes):
            for k in range(config.samples_per_class):
                samples.append(synthesize_sample(config, label, label * config.samples_per_class + k))
        return samples


@dataclass
class GaussianRingDataLoaderStrategy(BaseDataLoaderStrategy):
    """
    Toy mixture of `modes` Gaussians on a ring, embedded as a two-joint
    sequence: the anchor joint stays at the origin and the tip ramps linearly
    towards the sampled point. The class is the mode index.
    """

    modes: int = 8
    samples_per_class: int = 250
    radius: float = 2.0
    std: float = 0.02
    frames: int = 4
    seed: int = 7

    def __call__(self) -> t.List[MotionSample]:
        rng = RandomStreams(self.seed).generator("gaussian_ring")
        ramp = np.arange(1, self.frames + 1) / self.frames
        samples = []
        for mode in range(self.modes):
            angle = 2 * np.pi * mode / self.modes
            center = self.radius * np.array([np.cos(angle), np.sin(angle)])
            points = center + self.std * rng.standard_normal((self.samples_per_class, 2))
            for k, point in enumerate(points):
                data = np.zeros((2, self.frames, 2))
                data[:, :, 1] = point[:, None] * ramp[None, :]
                samples.append(MotionSample(data=data, label=mode, skeleton="toy2", provenance=f"gaussian_ring:{self.seed}:{mode}:{k}"))
        return samples


@dataclass
class NtuDirDataLoaderStrategy(BaseDataLoaderStrategy):
    """
    Strategy for loading NTU-style `.skeleton` files from a directory. Files
    are parsed in a process pool; action ids are remapped to contiguous classes.

    Args:
        dir (t.Union[Path, str]): Directory where skeleton files can be found
        pattern (str): Glob for the files
        multiprocess (bool): Parse in a pool capped by `KFORGE_THREADS`
    """

    dir: t.Union[Path, str]
    pattern: str = "*.skeleton"
    multiprocess: bool = True

    def __call__(self) -> t.List[MotionSample]:
        directory = Path(self.dir)
        if not directory.is_dir():
            raise DatasetError(f"{directory.absolute()} is not a directory")
        paths = sorted(directory.glob(self.pattern))
        if len(paths) == 0:
            raise DatasetError(f"No `{self.pattern}` files present in the directory {directory}")
        try:
            if self.multiprocess and thread_limit() > 1:
                with mp.Pool(min(thread_limit(), len(paths))) as pool:
                    parsed = pool.map(parse_skeleton_file, paths)
            else:
                parsed = list(map(parse_skeleton_file, paths))
        except (FileNotFoundError, NotADirectoryError) as e:
            raise DatasetError(f"Could not read skeleton files under {directory}: {e}") from e
        samples = [sample for per_file in parsed for sample in per_file]
        actions = sorted({s.label for s in samples})
        remap = {action: i for i, action in enumerate(actions)}
        for sample in samples:
            sample.label = remap[sample.label]
        logger.info(f"Parsed {len(samples)} bodies from {len(paths)} files ({len(actions)} actions)")
        return samples


@dataclass
class SequenceDirDataLoaderStrategy(BaseDataLoaderStrategy):
    """
    Strategy for loading exported sequence JSON files from a directory
    """

    dir: t.Union[Path, str]
    pattern: str = "*.json"

    def __call__(self) -> t.List[MotionSample]:
        directory = Path(self.dir)
        if not directory.is_dir():
            raise DatasetError(f"{directory.absolute()} is not a directory")
        paths = sorted(directory.glob(self.pattern))
        if len(paths) == 0:
            raise DatasetError(f"No `{self.pattern}` files present in the directory {directory}")
        try:
            return [import_sequence(path) for path in paths]
        except (FileNotFoundError, NotADirectoryError) as e:
            raise DatasetError(f"Could not read sequence files under {directory}: {e}") from e


# Factory for all the loading strategies
DataLoaderStrategyFactory: t.Dict[str, t.Type[BaseDataLoaderStrategy]] = {
    "synthetic": SyntheticDataLoaderStrategy,
    "gaussian_ring": GaussianRingDataLoaderStrategy,
    "ntu_dir": NtuDirDataLoaderStrategy,
    "sequence_dir": SequenceDirDataLoaderStrategy,
}


class DataEngine:
    @staticmethod
    def load(config: Box) -> t.List[MotionSample]:
        """
        Load samples using a strategy

        Args:
            config (Box): `data.load` section with `strategy` and `args`

        Raises:
            ConfigValidationError: Unknown strategy or an empty result

        Returns:
            t.List[MotionSample]: Loaded samples
        """
        if config.get("strategy") not in DataLoaderStrategyFactory:
            raise ConfigValidationError(
                f"Strategy '{config.get('strategy')}' not valid. Choose one of {list(DataLoaderStrategyFactory)}"
            )
        args = dict(config.get("args") or {})
        samples = DataLoaderStrategyFactory[config.strategy](**args)()
        if not samples:
            raise ConfigValidationError(f"Strategy '{config.strategy}' produced no samples")
        return samples

    @staticmethod
    def normalize(config: t.Optional[Box], samples: t.List[MotionSample]) -> t.List[MotionSample]:
        """
        Applies `normalize_sequence` to every sample; a missing section keeps samples as they are
        """
        if not config:
            return samples
        return [normalize_sequence(s, int(config.frames), config.get("mode", "global3d"), config.get("root")) for s in samples]

    @staticmethod
    def split(config: Box, samples: t.List[MotionSample], seed: int) -> t.List[str]:
        """
        Train/eval tags per sample, stratified by class when asked
        """
        ratio = float(config.get("ratio", 0.0))
        if ratio <= 0.0:
            return ["train"] * len(samples)
        index = np.arange(len(samples))
        labels = np.array([s.label for s in samples])
        _, eval_index = train_test_split(
            index,
            test_size=ratio,
            random_state=seed,
            stratify=labels if config.get("stratify", True) else None,
        )
        tags = np.full(len(samples), "train", dtype=object)
        tags[eval_index] = "eval"
        return tags.tolist()

    @staticmethod
    def assemble(
        samples: t.List[MotionSample],
        splits: t.List[str],
        settings: t.Optional[t.Dict[str, t.Any]] = None,
    ) -> MotionDataset:
        """
        Stacks samples into one array and builds the manifest

        Raises:
            ShapeError: Samples of different shapes or skeletons
        """
        shapes = {s.data.shape for s in samples}
        skeletons = {s.skeleton for s in samples}
        if len(shapes) != 1 or len(skeletons) != 1:
            raise ShapeError(f"Samples must share one shape and skeleton, got {shapes} and {skeletons}")
        channels, frames, joints = shapes.pop()
        columns = {
            "sample_id": [f"{i:06d}" for i in range(len(samples))],
            "label": [s.label for s in samples],
            "split": list(splits),
            "provenance": [s.provenance for s in samples],
            "frames": [frames] * len(samples),
            "joints": [joints] * len(samples),
            "channels": [channels] * len(samples),
        }
        if any(s.frequency is not None for s in samples):
            columns["frequency"] = [s.frequency for s in samples]
        manifest = pl.DataFrame(columns, schema_overrides={"label": pl.Int64, "frames": pl.Int64, "joints": pl.Int64, "channels": pl.Int64})
        return MotionDataset(
            X=np.stack([s.data for s in samples]).astype(get_default_dtype()),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            skeleton=skeletons.pop(),
            manifest=DataEngine.validate(manifest),
            settings=dict(settings or {}),
        )

    @staticmethod
    def validate(manifest: pl.DataFrame) -> pl.DataFrame:
        """
        Checks the manifest against `ManifestSchema`

        Raises:
            ConfigValidationError: When the manifest doesn't fit the schema

        Returns:
            pl.DataFrame: Same manifest if passed
        """
        try:
            ManifestSchema.validate(manifest.to_pandas(), lazy=True)
        except pa.errors.SchemaErrors as err:
            logger.error(f"Manifest schema errors and failure cases:\n{err.failure_cases}")
            raise ConfigValidationError("Manifest does not fit the schema") from err
        return manifest

    @staticmethod
    def build(config: Box, seed: int) -> MotionDataset:
        """
        load -> normalize -> split -> assemble, as configured in the `data` section
        """
        samples = DataEngine.load(config.load)
        samples = DataEngine.normalize(config.get("normalize"), samples)
        splits = DataEngine.split(config.get("split") or Box(), samples, seed)
        settings = {"load": config.load.to_dict(), "normalize": (config.get("normalize") or Box()).to_dict()}
        return DataEngine.assemble(samples, splits, settings)


def validate_data_config(config: Box) -> None:
    """
    Validates configuration mapping specific to data

    Args:
        config (Box): Configuration mapping
    """
    data_config = config.get("data")
    if data_config is None:
        raise ConfigValidationError("data section is required")

    data_stages = ["load", "normalize", "split"]
    for stage in data_config.keys():
        if stage not in data_stages:
            raise ConfigValidationError(f"Stage '{stage}' not in DataStages{data_stages}")

    load_config = data_config.get("load") or Box()
    if load_config.get("strategy") not in DataLoaderStrategyFactory:
        raise ConfigValidationError(
            f"Strategy '{load_config.get('strategy')}' not valid data loading strategy. "
            f"Choose one of {list(DataLoaderStrategyFactory)}."
        )
    strategy = DataLoaderStrategyFactory[load_config.strategy]
    unknown = set((load_config.get("args") or {}).keys()) - set(strategy.__dataclass_fields__)
    if unknown:
        raise ConfigValidationError(f"Unknown arguments {sorted(unknown)} for strategy '{load_config.strategy}'")
    if load_config.strategy == "synthetic":
        strategy(**dict(load_config.get("args") or {})).config

    normalize_config = data_config.get("normalize")
    if normalize_config:
        if normalize_config.get("mode", "global3d") not in NORMALIZE_MODES:
            raise ConfigValidationError(f"data.normalize.mode should be one of {NORMALIZE_MODES}")
        if int(normalize_config.get("frames", 0)) < 1:
            raise ConfigValidationError("data.normalize.frames should be a positive integer")

    split_config = data_config.get("split")
    if split_config:
        split_args = ["ratio", "stratify"]
        for arg in split_config.keys():
            if arg not in split_args:
                raise ConfigValidationError(f"Unknown split argument '{arg}'. Should be {split_args}")
        if not 0.0 <= float(split_config.get("ratio", 0.0)) < 1.0:
            raise ConfigValidationError("Split should be a ratio between 0.0 and 1.0")
        if not isinstance(split_config.get("stratify", True), bool):
            raise ConfigValidationError("Stratify should either be true or false")
