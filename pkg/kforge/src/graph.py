"""
Skeleton topology, partitioned adjacencies and the multi-resolution graph
pyramid used by the generator (upsampling) and discriminator (downsampling)
"""

import functools as F
import json
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pydantic
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from kforge.src.exceptions import GraphDefinitionError, ShapeError
from kforge.src.tensor import Tensor, einsum, take

PYRAMID_DIR = Path(__file__).resolve().parents[1] / "conf" / "pyramids"
NUM_PARTITIONS = 3
PARTITION_NAMES = ("root", "centripetal", "centrifugal")
DEGREE_EPS = 1e-12

Motion = t.Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class SkeletonSpec:
    """
    Joints and bones of one skeleton resolution

    Args:
        name (str): Skeleton name, e.g. `ntu25`
        joint_names (t.Tuple[str, ...]): Ordered joint names
        edges (t.Tuple[t.Tuple[int, int], ...]): Undirected bones, no self-loops
        center (int): Gravity-centre joint used for partitioning
        root (int): Joint anchoring local (root-relative) coordinates
    """

    name: str
    joint_names: t.Tuple[str, ...]
    edges: t.Tuple[t.Tuple[int, int], ...]
    center: int
    root: int

    def __post_init__(self):
        n = len(self.joint_names)
        if n == 0:
            raise GraphDefinitionError(f"Skeleton '{self.name}' has no joints")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise GraphDefinitionError(f"Skeleton '{self.name}': edge ({i}, {j}) references a missing joint")
            if i == j:
                raise GraphDefinitionError(f"Skeleton '{self.name}': self-loop on joint {i}")
            if frozenset((i, j)) in seen:
                raise GraphDefinitionError(f"Skeleton '{self.name}': duplicate edge ({i}, {j})")
            seen.add(frozenset((i, j)))
        for role, index in (("center", self.center), ("root", self.root)):
            if not 0 <= index < n:
                raise GraphDefinitionError(f"Skeleton '{self.name}': {role} joint {index} out of range")
        if n > 1 and connected_components(csr_matrix(self.adjacency()), directed=False)[0] != 1:
            raise GraphDefinitionError(f"Skeleton '{self.name}' is not connected")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def adjacency(self) -> np.ndarray:
        n = self.num_joints
        A = np.zeros((n, n), dtype=np.float64)
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    def hop_distances(self) -> np.ndarray:
        """
        Hop distance of every joint to the centre joint
        """
        if self.num_joints == 1:
            return np.zeros(1)
        return shortest_path(csr_matrix(self.adjacency()), unweighted=True, directed=False, indices=self.center)


@dataclass(frozen=True)
class PartitionedAdjacency:
    """
    Root / centripetal / centrifugal neighbour sets of one level, raw and
    degree-normalised, both of shape [3, N, N]
    """

    level: int
    raw: np.ndarray
    normalized: np.ndarray

    @property
    def num_joints(self) -> int:
        return self.raw.shape[-1]


def degree_scale(degrees: np.ndarray) -> np.ndarray:
    """
    d^(-1/2) with empty rows treated as degree 1
    """
    return np.power(np.where(degrees > DEGREE_EPS, degrees, 1.0), -0.5)


def normalize_partitions(raw: np.ndarray) -> np.ndarray:
    """
    Λ^(-1/2) A Λ^(-1/2) per partition, Λ built from that partition's row sums
    """
    scale = degree_scale(np.sum(raw, axis=(2,), keepdims=True))
    return raw * scale * np.transpose(scale, (0, 2, 1))


def partition_and_normalize(spec: SkeletonSpec, level: int = 0) -> PartitionedAdjacency:
    """
    Splits A + I into the root (identity), centripetal and centrifugal
    partitions relative to the skeleton's centre joint.

    An entry (i, j) is centripetal when neighbour j is strictly closer to the
    centre than the receiving joint i; ties and farther neighbours are centrifugal.

    Args:
        spec (SkeletonSpec): Connected skeleton
        level (int): Pyramid level the adjacency belongs to

    Returns:
        PartitionedAdjacency: Raw and normalised partitions
    """
    n = spec.num_joints
    hops = spec.hop_distances()
    raw = np.zeros((NUM_PARTITIONS, n, n), dtype=np.float64)
    raw[0] = np.eye(n)
    for a, b in spec.edges:
        for i, j in ((a, b), (b, a)):
            raw[1 if hops[j] < hops[i] else 2, i, j] = 1.0
    return PartitionedAdjacency(level=level, raw=raw, normalized=normalize_partitions(raw))


@dataclass(frozen=True)
class PyramidLevel:
    """
    One resolution of the pyramid.

    `keep_list[i]` is the index at this level of vertex i of the level below;
    `up_map` maps each vertex introduced at this level to the 1-2 vertices of
    the level below whose values it averages. Both are empty at level 0.
    """

    index: int
    spec: SkeletonSpec
    adjacency: PartitionedAdjacency
    keep_list: t.Tuple[int, ...] = ()
    up_map: t.Dict[int, t.Tuple[int, ...]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.spec.num_joints

    @F.cached_property
    def up_matrix(self) -> np.ndarray:
        """
        [N_l, N_(l-1)] operator carrying kept vertices and averaging introduced ones
        """
        coarse = len(self.keep_list)
        U = np.zeros((self.size, coarse), dtype=np.float64)
        for i, k in enumerate(self.keep_list):
            U[k, i] = 1.0
        for k, sources in self.up_map.items():
            for s in sources:
                U[k, s] += 1.0 / len(sources)
        U.setflags(write=False)
        return U


@dataclass(frozen=True)
class GraphPyramid:
    name: str
    levels: t.Tuple[PyramidLevel, ...]
    rest_pose: t.Optional[np.ndarray] = None

    @property
    def level_sizes(self) -> t.Tuple[int, ...]:
        return tuple(level.size for level in self.levels)

    @property
    def finest(self) -> PyramidLevel:
        return self.levels[-1]

    def __len__(self) -> int:
        return len(self.levels)


class PyramidTable(pydantic.BaseModel):
    """
    Pyramid definition file. Joint indices of `center_joint`, `root_joint`,
    `joint_names` and `rest_pose` refer to the finest level; coarser levels
    inherit centre and root through the keep-lists.
    """

    model_config = pydantic.ConfigDict(extra="forbid")

    skeleton_name: str
    level_sizes: t.List[pydantic.PositiveInt]
    joint_names: t.List[str]
    edges: t.List[t.List[t.Tuple[int, int]]]
    up_maps: t.List[t.Optional[t.Dict[int, t.List[int]]]]
    keep_lists: t.List[t.Optional[t.List[int]]]
    center_joint: int
    root_joint: int
    rest_pose: t.Optional[t.List[t.List[float]]] = None

    @pydantic.model_validator(mode="after")
    def _check_lengths(self) -> "PyramidTable":
        n_levels = len(self.level_sizes)
        for name in ("edges", "up_maps", "keep_lists"):
            if len(getattr(self, name)) != n_levels:
                raise ValueError(f"'{name}' needs one entry per level ({n_levels})")
        if len(self.joint_names) != self.level_sizes[-1]:
            raise ValueError("'joint_names' must list the finest level's joints")
        if self.rest_pose is not None and len(self.rest_pose) != self.level_sizes[-1]:
            raise ValueError("'rest_pose' needs one coordinate row per finest-level joint")
        return self


def load_pyramid_table(name_or_path: t.Union[str, Path]) -> PyramidTable:
    """
    Loads a bundled (`ntu25`, `h36m15`, `toy2`) or user pyramid definition file

    Raises:
        GraphDefinitionError: Missing file or schema violation
    """
    path = Path(name_or_path)
    if not path.suffix:
        path = PYRAMID_DIR / f"{name_or_path}.json"
    if not path.is_file():
        raise GraphDefinitionError(f"Pyramid definition '{name_or_path}' not found")
    try:
        return PyramidTable.model_validate(json.loads(path.read_text()))
    except (pydantic.ValidationError, json.JSONDecodeError) as e:
        raise GraphDefinitionError(f"Invalid pyramid definition {path}: {e}") from e


def skeleton_from_table(table: PyramidTable) -> SkeletonSpec:
    return SkeletonSpec(
        name=table.skeleton_name,
        joint_names=tuple(table.joint_names),
        edges=tuple(tuple(e) for e in table.edges[-1]),
        center=table.center_joint,
        root=table.root_joint,
    )


def build_pyramid(
    spec: SkeletonSpec,
    level_sizes: t.Sequence[int],
    table: t.Optional[PyramidTable] = None,
) -> GraphPyramid:
    """
    Builds the pyramid of `spec` from its definition table

    Args:
        spec (SkeletonSpec): Finest skeleton
        level_sizes (t.Sequence[int]): Joint counts from coarsest to finest
        table (t.Optional[PyramidTable]): Definition table, defaults to the bundled one named like `spec`

    Raises:
        GraphDefinitionError: Sizes not increasing, table inconsistent with `spec`,
            or an up-map/keep-list that does not cover a level exactly

    Returns:
        GraphPyramid: Levels with partitioned adjacencies and resampling maps
    """
    sizes = [int(n) for n in level_sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise GraphDefinitionError(f"Level sizes must be strictly increasing, got {sizes}")
    if sizes[-1] != spec.num_joints:
        raise GraphDefinitionError(f"Finest level has {sizes[-1]} joints but '{spec.name}' has {spec.num_joints}")
    if len(sizes) == 1:
        level = PyramidLevel(index=0, spec=spec, adjacency=partition_and_normalize(spec, 0))
        return GraphPyramid(name=spec.name, levels=(level,))

    table = table if table is not None else load_pyramid_table(spec.name)
    if list(table.level_sizes) != sizes:
        raise GraphDefinitionError(f"Table '{table.skeleton_name}' has levels {table.level_sizes}, requested {sizes}")
    if {frozenset(e) for e in table.edges[-1]} != {frozenset(e) for e in spec.edges}:
        raise GraphDefinitionError(f"Table '{table.skeleton_name}' edges differ from skeleton '{spec.name}'")

    # Names, centre and root flow from the finest level down the keep-lists
    names = [list(spec.joint_names)]
    centers, roots = [spec.center], [spec.root]
    for l in range(len(sizes) - 1, 0, -1):
        keep = table.keep_lists[l]
        if keep is None or len(keep) != sizes[l - 1] or len(set(keep)) != len(keep):
            raise GraphDefinitionError(f"Level {l}: keep-list must hold {sizes[l - 1]} distinct vertices")
        if any(not 0 <= k < sizes[l] for k in keep):
            raise GraphDefinitionError(f"Level {l}: keep-list references a missing vertex")
        if centers[0] not in keep:
            raise GraphDefinitionError(f"Level {l}: centre joint does not survive coarsening")
        names.insert(0, [names[0][k] for k in keep])
        centers.insert(0, keep.index(centers[0]))
        roots.insert(0, keep.index(roots[0]) if roots[0] in keep else centers[0])

    levels = []
    for l, size in enumerate(sizes):
        level_spec = spec if l == len(sizes) - 1 else SkeletonSpec(
            name=f"{spec.name}@{size}",
            joint_names=tuple(names[l]),
            edges=tuple(tuple(e) for e in table.edges[l]),
            center=centers[l],
            root=roots[l],
        )
        keep_list: t.Tuple[int, ...] = ()
        up_map: t.Dict[int, t.Tuple[int, ...]] = {}
        if l > 0:
            keep_list = tuple(table.keep_lists[l])
            up_map = {int(k): tuple(v) for k, v in (table.up_maps[l] or {}).items()}
            introduced = set(range(size)) - set(keep_list)
            if set(up_map) != introduced:
                raise GraphDefinitionError(
                    f"Level {l}: up-map covers {sorted(up_map)} but introduced vertices are {sorted(introduced)}"
                )
            for k, sources in up_map.items():
                if not 1 <= len(sources) <= 2 or any(not 0 <= s < sizes[l - 1] for s in sources):
                    raise GraphDefinitionError(f"Level {l}: vertex {k} has unreachable up-map sources {sources}")
        levels.append(
            PyramidLevel(
                index=l,
                spec=level_spec,
                adjacency=partition_and_normalize(level_spec, l),
                keep_list=keep_list,
                up_map=up_map,
            )
        )
    rest_pose = np.asarray(table.rest_pose, dtype=np.float64) if table.rest_pose is not None else None
    return GraphPyramid(name=spec.name, levels=tuple(levels), rest_pose=rest_pose)


@F.lru_cache(maxsize=None)
def load_pyramid(name_or_path: str) -> GraphPyramid:
    """
    Reads a definition table and builds its pyramid
    """
    table = load_pyramid_table(name_or_path)
    return build_pyramid(skeleton_from_table(table), table.level_sizes, table)


def _contract(X: Motion, matrix: np.ndarray, axis: int) -> Motion:
    """
    out[..., i, ...] = sum_j matrix[i, j] * X[..., j, ...] along `axis`
    """
    axis = axis % X.ndim
    letters = "abcdefghij"[: X.ndim]
    target = letters[:axis] + "y" + letters[axis + 1 :]
    subscripts = f"{letters},y{letters[axis]}->{target}"
    if isinstance(X, Tensor):
        return einsum(subscripts, X, Tensor(matrix.astype(X.dtype)))
    return np.einsum(subscripts, X, matrix.astype(X.dtype), optimize=True)


def spatial_upsample(X: Motion, pyramid: GraphPyramid, level: int) -> Motion:
    """
    Level `level` -> `level + 1`: kept vertices are copied, introduced vertices
    are the mean of their up-map sources. Joints are the last axis.
    """
    if not 0 <= level < len(pyramid) - 1:
        raise ShapeError(f"Cannot upsample from level {level} of a {len(pyramid)}-level pyramid")
    if X.shape[-1] != pyramid.levels[level].size:
        raise ShapeError(f"Expected {pyramid.levels[level].size} joints at level {level}, got {X.shape[-1]}")
    return _contract(X, pyramid.levels[level + 1].up_matrix, axis=-1)


def spatial_downsample(X: Motion, pyramid: GraphPyramid, level: int) -> Motion:
    """
    Level `level` -> `level - 1`: keeps exactly the keep-list vertices
    """
    if not 0 < level < len(pyramid):
        raise ShapeError(f"Cannot downsample from level {level} of a {len(pyramid)}-level pyramid")
    if X.shape[-1] != pyramid.levels[level].size:
        raise ShapeError(f"Expected {pyramid.levels[level].size} joints at level {level}, got {X.shape[-1]}")
    keep = np.asarray(pyramid.levels[level].keep_list, dtype=np.int64)
    if isinstance(X, Tensor):
        return take(X, keep, axis=-1)
    return np.take(X, keep, axis=-1)


@F.lru_cache(maxsize=256)
def resample_matrix(frames: int, new_frames: int) -> np.ndarray:
    """
    Linear interpolation operator [new_frames, frames] on a uniform grid with
    both endpoints preserved
    """
    if new_frames == 1:
        positions = np.zeros(1)
    else:
        positions = np.arange(new_frames) * (frames - 1) / (new_frames - 1)
    lower = np.minimum(np.floor(positions).astype(np.int64), frames - 1)
    upper = np.minimum(lower + 1, frames - 1)
    frac = positions - lower
    R = np.zeros((new_frames, frames), dtype=np.float64)
    np.add.at(R, (np.arange(new_frames), lower), 1.0 - frac)
    np.add.at(R, (np.arange(new_frames), upper), frac)
    R.setflags(write=False)
    return R


def temporal_resample(X: Motion, new_frames: int) -> Motion:
    """
    Per joint and channel linear interpolation along the frame axis (second to last)

    Raises:
        ShapeError: Empty input or `new_frames` < 1
    """
    frames = X.shape[-2]
    if frames < 1:
        raise ShapeError("Cannot resample a sequence without frames")
    if new_frames < 1:
        raise ShapeError(f"Target frame count must be positive, got {new_frames}")
    if new_frames == frames:
        return X
    return _contract(X, resample_matrix(frames, int(new_frames)), axis=-2)
