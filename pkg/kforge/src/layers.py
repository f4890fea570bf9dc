"""
Building blocks of the generator, discriminator and feature classifier.

All weights are drawn from N(0, 1) and rescaled by 1/sqrt(fan_in) at every
forward pass (equalised learning rate). Tensors are laid out as
[batch, channels, frames, joints].
"""

import typing as t

import numpy as np
from kforge.src.exceptions import ConfigValidationError, InvalidClassError, ShapeError
from kforge.src.graph import DEGREE_EPS, PartitionedAdjacency
from kforge.src.tensor import (
    Parameter,
    RandomStreams,
    Tensor,
    einsum,
    get_default_dtype,
    leaky_relu,
    no_grad,
    ones,
    sqrt,
    take,
    transpose,
    zeros,
)


def _normal(rng: np.random.Generator, shape: t.Sequence[int]) -> np.ndarray:
    return rng.standard_normal(tuple(shape)).astype(get_default_dtype())


class Module:
    """
    Minimal container: parameters and sub-modules assigned as attributes are
    discovered by `named_parameters`, lists of modules are indexed by position
    """

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> t.Iterator[t.Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "", trainable_only: bool = False) -> t.Dict[str, Parameter]:
        """
        Parameters keyed by their dotted path, e.g. `blocks.2.spatial.mask`
        """
        out: t.Dict[str, Parameter] = {}
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                path = f"{prefix}{name}"
                value.name = path
                if value.trainable or not trainable_only:
                    out[path] = value
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}.", trainable_only))
        return out

    def parameters(self) -> t.List[Parameter]:
        return list(self.named_parameters(trainable_only=True).values())

    def modules(self) -> t.Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_arrays(self, prefix: str = "") -> t.Dict[str, np.ndarray]:
        return {path: p.data.copy() for path, p in self.named_parameters(prefix).items()}

    def load_arrays(self, arrays: t.Mapping[str, np.ndarray], prefix: str = "") -> None:
        for path, param in self.named_parameters(prefix).items():
            if path not in arrays:
                raise ShapeError(f"No stored values for parameter '{path}'")
            param.assign(arrays[path])


class Linear(Module):
    """
    [batch, in] -> [batch, out]
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(_normal(rng, (in_features, out_features)))
        self.bias = Parameter(zeros((out_features,)))
        self.scale = 1.0 / np.sqrt(in_features)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects [batch, {self.in_features}], got {x.shape}")
        return einsum("bi,io->bo", x, self.weight * self.scale) + self.bias


class SpatialGraphConv(Module):
    """
    Partition-wise graph convolution with a learnable mask. The mask multiplies
    the raw partitions and the product is re-normalised by its own degrees
    on every call.

    Args:
        in_channels (int): Input feature channels
        out_channels (int): Output feature channels
        adjacency (PartitionedAdjacency): Partitions of the level the layer runs on
        rng (np.random.Generator): Initialisation generator
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        adjacency: PartitionedAdjacency,
        rng: np.random.Generator,
    ):
        super().__init__()
        partitions, n, _ = adjacency.raw.shape
        self.in_channels, self.out_channels = in_channels, out_channels
        self.adjacency = adjacency
        self.weight = Parameter(_normal(rng, (partitions, in_channels, out_channels)))
        self.bias = Parameter(zeros((out_channels,)))
        self.mask = Parameter(ones((n, n)))
        self.scale = 1.0 / np.sqrt(partitions * in_channels)

    def normalized_adjacency(self) -> Tensor:
        """
        Λ^(-1/2) (A_p ⊙ M) Λ^(-1/2) for every partition p, shape [P, N, N]
        """
        masked = Tensor(self.adjacency.raw.astype(self.mask.dtype)) * self.mask
        degrees = masked.sum(axis=(2,), keepdims=True)
        kept = degrees.data > DEGREE_EPS
        guarded = degrees * kept.astype(degrees.dtype) + (~kept).astype(degrees.dtype)
        scale = guarded**-0.5
        return masked * scale * transpose(scale, (0, 2, 1))

    def forward(self, X: Tensor) -> Tensor:
        if X.ndim != 4 or X.shape[1] != self.in_channels or X.shape[3] != self.adjacency.num_joints:
            raise ShapeError(
                f"SpatialGraphConv expects [batch, {self.in_channels}, frames, {self.adjacency.num_joints}], got {X.shape}"
            )
        aggregated = einsum("bctj,pij->bpcti", X, self.normalized_adjacency())
        out = einsum("bpcti,pcd->bdti", aggregated, self.weight * self.scale)
        return out + self.bias.reshape(1, -1, 1, 1)


class TemporalConv(Module):
    """
    Joint-wise 1-D convolution over frames with stride 1 and replicate padding,
    so the frame count is preserved and constant signals stay constant under
    sum-one kernels
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigValidationError(f"Temporal kernel size must be odd and positive, got {kernel_size}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = kernel_size
        self.weight = Parameter(_normal(rng, (out_channels, in_channels, kernel_size)))
        self.bias = Parameter(zeros((out_channels,)))
        self.scale = 1.0 / np.sqrt(in_channels * kernel_size)

    def forward(self, X: Tensor) -> Tensor:
        if X.ndim != 4 or X.shape[1] != self.in_channels:
            raise ShapeError(f"TemporalConv expects [batch, {self.in_channels}, frames, joints], got {X.shape}")
        frames = X.shape[2]
        if frames < 1:
            raise ShapeError("TemporalConv needs at least one frame")
        half = self.kernel_size // 2
        window = np.arange(frames)[:, None] + np.arange(self.kernel_size)[None, :] - half
        patches = take(X, np.clip(window, 0, frames - 1), axis=2)
        out = einsum("bctkn,ock->botn", patches, self.weight * self.scale)
        return out + self.bias.reshape(1, -1, 1, 1)


class NoiseInjection(Module):
    """
    Adds per-joint Gaussian noise scaled by learned per-channel weights.
    Weights start at zero, which makes the added term exactly zero.

    Args:
        channels (int): Channels of the feature map the noise is added to
        stream (str): Random stream id the noise is drawn from
    """

    def __init__(self, channels: int, stream: str):
        super().__init__()
        self.stream = stream
        self.weight = Parameter(zeros((channels,)))

    def forward(self, X: Tensor, noise: t.Optional[RandomStreams], counter: int = 0) -> Tensor:
        if noise is None:
            raise ConfigValidationError(f"Noise stream '{self.stream}' is unset, pass a noise seed")
        batch, _, frames, joints = X.shape
        r = noise.normal(self.stream, (batch, 1, frames, joints), counter)
        return X + Tensor(r.data.astype(X.dtype)) * self.weight.reshape(1, -1, 1, 1)


class BatchNorm(Module):
    """
    Per-channel batch normalisation over (batch, frames, joints). Running
    statistics are non-trainable parameters so they travel with checkpoints.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(ones((channels,)))
        self.bias = Parameter(zeros((channels,)))
        self.running_mean = Parameter(zeros((channels,)), trainable=False)
        self.running_var = Parameter(ones((channels,)), trainable=False)

    def forward(self, X: Tensor) -> Tensor:
        if self.training:
            mu = X.mean(axis=(0, 2, 3), keepdims=True)
            var = ((X - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            with no_grad():
                m = self.momentum
                self.running_mean.assign((1 - m) * self.running_mean.data + m * mu.data.reshape(-1))
                self.running_var.assign((1 - m) * self.running_var.data + m * var.data.reshape(-1))
        else:
            mu = Tensor(self.running_mean.data.reshape(1, -1, 1, 1))
            var = Tensor(self.running_var.data.reshape(1, -1, 1, 1))
        normalized = (X - mu) / sqrt(var + self.eps)
        return normalized * self.weight.reshape(1, -1, 1, 1) + self.bias.reshape(1, -1, 1, 1)


class ClassEmbedding(Module):
    def __init__(self, num_classes: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.num_classes, self.embed_dim = num_classes, embed_dim
        self.table = Parameter(_normal(rng, (num_classes, embed_dim)))

    def forward(self, labels: t.Union[np.ndarray, t.Sequence[int]]) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        bad = labels[(labels < 0) | (labels >= self.num_classes)]
        if bad.size:
            raise InvalidClassError(f"Class id {int(bad[0])} outside [0, {self.num_classes})")
        return take(self.table, labels, axis=0)


class MappingNetwork(Module):
    """
    z ⊕ embed(y) -> w. Depth 0 is a single affine projection; depth d stacks
    d fully connected layers, each followed by a leaky rectifier.
    """

    def __init__(self, in_features: int, width: int, depth: int, rng: np.random.Generator):
        super().__init__()
        if depth < 0:
            raise ConfigValidationError(f"Mapping depth must be non-negative, got {depth}")
        self.depth = depth
        sizes = [in_features] + [width] * max(depth, 1)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
            if self.depth > 0:
                x = leaky_relu(x, 0.2)
        return x
