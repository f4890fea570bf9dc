"""
This file contains the generator, the discriminator and the feature
classifier built on top of the graph pyramid, plus truncation and the
batch-norm placement audit
"""

import math
import typing as t
from dataclasses import dataclass, field

import numpy as np
from box import Box
from kforge.src.exceptions import ConfigValidationError, GraphDefinitionError, ShapeError
from kforge.src.graph import GraphPyramid, load_pyramid, spatial_downsample, spatial_upsample, temporal_resample
from kforge.src.layers import (
    BatchNorm,
    ClassEmbedding,
    Linear,
    MappingNetwork,
    Module,
    NoiseInjection,
    SpatialGraphConv,
    TemporalConv,
)
from kforge.src.tensor import RandomStreams, Tensor, concat, expand, leaky_relu, no_grad, relu

BATCHNORM_POLICIES = ("all", "no_upsample", "none")


@dataclass
class ModelConfig:
    """
    Architecture settings shared by generator, discriminator and classifier

    `widths` are the generator feature channels entering each block, the last
    block emits `channels` coordinates. The discriminator mirrors them.
    """

    num_classes: int
    pyramid: str = "ntu25"
    channels: int = 3
    frames: int = 64
    latent_dim: int = 512
    embed_dim: int = 64
    w_dim: int = 512
    mapping_depth: int = 4
    widths: t.Tuple[int, ...] = (512, 256, 128, 64)
    kernel_size: int = 9
    batchnorm: str = "no_upsample"
    residual: bool = True
    noise_injection: bool = True
    classifier_widths: t.Tuple[int, ...] = (32, 64)

    def __post_init__(self):
        self.widths = tuple(int(c) for c in self.widths)
        self.classifier_widths = tuple(int(c) for c in self.classifier_widths)

    @classmethod
    def from_config(cls, model_config: t.Mapping) -> "ModelConfig":
        model_config = dict(model_config)
        classifier = dict(model_config.pop("classifier", None) or {})
        if "widths" in classifier:
            model_config["classifier_widths"] = classifier["widths"]
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in model_config.items() if k in known})


@dataclass(frozen=True)
class BlockPlan:
    """
    Resolution change performed by one generator block (the discriminator
    walks the same plans backwards)
    """

    index: int
    in_channels: int
    out_channels: int
    level_in: int
    level_out: int
    frames_in: int
    frames_out: int

    @property
    def spatial(self) -> bool:
        return self.level_out != self.level_in


def frame_schedule(frames: int, num_blocks: int) -> t.List[int]:
    """
    T_k = ceil(t / 2^(B - k)) for k = 0..B, so the last entry is `frames`
    """
    return [math.ceil(frames / 2 ** (num_blocks - k)) for k in range(num_blocks + 1)]


def block_schedule(config: ModelConfig, pyramid: GraphPyramid) -> t.List[BlockPlan]:
    """
    Spatial upsampling happens in the first blocks, the remaining blocks only
    double time. With the default NTU settings this gives
    (1, t/16) -> (5, t/8) -> (11, t/4) -> (25, t/2) -> (25, t).

    Raises:
        ConfigValidationError: Fewer blocks than pyramid transitions
    """
    num_blocks = len(config.widths)
    transitions = len(pyramid) - 1
    if num_blocks < transitions:
        raise ConfigValidationError(
            f"{num_blocks} blocks cannot cover the {len(pyramid)}-level pyramid '{pyramid.name}'"
        )
    frames = frame_schedule(config.frames, num_blocks)
    channels = list(config.widths) + [config.channels]
    plans = []
    for k in range(num_blocks):
        level_in = min(k, transitions)
        plans.append(
            BlockPlan(
                index=k,
                in_channels=channels[k],
                out_channels=channels[k + 1],
                level_in=level_in,
                level_out=min(k + 1, transitions),
                frames_in=frames[k],
                frames_out=frames[k + 1],
            )
        )
    return plans


class GeneratorBlock(Module):
    """
    act(T(S(Up X))) [-> BN] + T(Up X) + r * w

    Args:
        plan (BlockPlan): Resolutions and channels of the block
        pyramid (GraphPyramid): Graph pyramid
        kernel_size (int): Temporal kernel frames
        batchnorm (bool): Normalise the main path
        residual (bool): Add the temporal-only skip path
        noise_injection (bool): Add weighted per-joint noise
        final (bool): Last block, no activation and no normalisation
        rng (np.random.Generator): Initialisation generator
    """

    def __init__(
        self,
        plan: BlockPlan,
        pyramid: GraphPyramid,
        kernel_size: int,
        batchnorm: bool,
        residual: bool,
        noise_injection: bool,
        final: bool,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.plan, self.pyramid, self.final = plan, pyramid, final
        adjacency = pyramid.levels[plan.level_out].adjacency
        self.spatial = SpatialGraphConv(plan.in_channels, plan.out_channels, adjacency, rng)
        self.temporal = TemporalConv(plan.out_channels, plan.out_channels, kernel_size, rng)
        self.skip = TemporalConv(plan.in_channels, plan.out_channels, kernel_size, rng) if residual else None
        self.norm = BatchNorm(plan.out_channels) if batchnorm and not final else None
        self.noise = NoiseInjection(plan.out_channels, stream=f"noise.block{plan.index}") if noise_injection else None

    def upsample(self, X: Tensor) -> Tensor:
        if self.plan.spatial:
            X = spatial_upsample(X, self.pyramid, self.plan.level_in)
        return temporal_resample(X, self.plan.frames_out)

    def forward(self, X: Tensor, noise: t.Optional[RandomStreams] = None) -> Tensor:
        expected = (self.plan.in_channels, self.plan.frames_in, self.pyramid.levels[self.plan.level_in].size)
        if tuple(X.shape[1:]) != expected:
            raise ShapeError(f"Generator block {self.plan.index} expects [batch, *{expected}], got {X.shape}")
        U = self.upsample(X)
        H = self.temporal(self.spatial(U))
        if not self.final:
            H = relu(H)
            if self.norm is not None:
                H = self.norm(H)
        if self.skip is not None:
            H = H + self.skip(U)
        if self.noise is not None:
            H = self.noise(H, noise)
        return H


class DiscriminatorBlock(Module):
    """
    Down(lrelu(T(S X)) + T(X)), no normalisation
    """

    def __init__(
        self,
        plan: BlockPlan,
        in_channels: int,
        out_channels: int,
        pyramid: GraphPyramid,
        kernel_size: int,
        residual: bool,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.plan, self.pyramid = plan, pyramid
        self.in_channels, self.out_channels = in_channels, out_channels
        adjacency = pyramid.levels[plan.level_out].adjacency
        self.spatial = SpatialGraphConv(in_channels, out_channels, adjacency, rng)
        self.temporal = TemporalConv(out_channels, out_channels, kernel_size, rng)
        self.skip = TemporalConv(in_channels, out_channels, kernel_size, rng) if residual else None

    def downsample(self, X: Tensor) -> Tensor:
        if self.plan.spatial:
            X = spatial_downsample(X, self.pyramid, self.plan.level_out)
        return temporal_resample(X, self.plan.frames_in)

    def forward(self, X: Tensor) -> Tensor:
        expected = (self.in_channels, self.plan.frames_out, self.pyramid.levels[self.plan.level_out].size)
        if tuple(X.shape[1:]) != expected:
            raise ShapeError(f"Discriminator block {self.plan.index} expects [batch, *{expected}], got {X.shape}")
        H = leaky_relu(self.temporal(self.spatial(X)), 0.2)
        if self.skip is not None:
            H = H + self.skip(X)
        return self.downsample(H)


class Generator(Module):
    """
    Mapping network, initial projection and the upsampling block path

    Args:
        config (ModelConfig): Architecture settings
        pyramid (GraphPyramid): Graph pyramid whose finest level is the output skeleton
        rng (np.random.Generator): Initialisation generator
        audit (bool): Refuse batch-norm placements inside spatially upsampling blocks
    """

    def __init__(self, config: ModelConfig, pyramid: GraphPyramid, rng: np.random.Generator, audit: bool = True):
        super().__init__()
        self.config, self.pyramid = config, pyramid
        self.plans = block_schedule(config, pyramid)
        self.embedding = ClassEmbedding(config.num_classes, config.embed_dim, rng)
        self.mapping = MappingNetwork(config.latent_dim + config.embed_dim, config.w_dim, config.mapping_depth, rng)
        first = self.plans[0]
        self.initial_shape = (first.in_channels, first.frames_in, pyramid.levels[0].size)
        self.projection = Linear(config.w_dim, int(np.prod(self.initial_shape)), rng)
        self.blocks = [
            GeneratorBlock(
                plan,
                pyramid,
                kernel_size=config.kernel_size,
                batchnorm=config.batchnorm == "all" or (config.batchnorm == "no_upsample" and not plan.spatial),
                residual=config.residual,
                noise_injection=config.noise_injection,
                final=plan.index == len(self.plans) - 1,
                rng=rng,
            )
            for plan in self.plans
        ]
        if audit:
            violations = audit_batchnorm(self)
            if violations:
                raise ConfigValidationError(f"Batch-norm policy '{config.batchnorm}' rejected: {'; '.join(violations)}")

    @property
    def output_shape(self) -> t.Tuple[int, int, int]:
        return self.config.channels, self.config.frames, self.pyramid.finest.size

    def map_latent(self, z: Tensor, labels: t.Union[np.ndarray, t.Sequence[int]]) -> Tensor:
        """
        w = f(z ⊕ embed(y))
        """
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"Latent codes must be [batch, {self.config.latent_dim}], got {z.shape}")
        embedded = self.embedding(labels)
        if embedded.shape[0] != z.shape[0]:
            raise ShapeError(f"{z.shape[0]} latent codes but {embedded.shape[0]} labels")
        return self.mapping(concat([z, embedded], axis=1))

    def synthesize(self, w: Tensor, noise_seed: t.Optional[int] = None) -> Tensor:
        """
        Runs the block path from intermediate latents to sequences [batch, C, t, N]
        """
        if w.ndim != 2 or w.shape[1] != self.config.w_dim:
            raise ShapeError(f"Intermediate latents must be [batch, {self.config.w_dim}], got {w.shape}")
        noise = RandomStreams(noise_seed) if noise_seed is not None else None
        X = self.projection(w).reshape((w.shape[0],) + self.initial_shape)
        for block in self.blocks:
            X = block(X, noise)
        return X

    def forward(self, z: Tensor, labels: t.Union[np.ndarray, t.Sequence[int]], noise_seed: t.Optional[int] = None) -> Tensor:
        return self.synthesize(self.map_latent(z, labels), noise_seed)


class Discriminator(Module):
    """
    Conditional critic: class embedding broadcast over frames and joints is
    concatenated to the skeleton channels, the mirrored block path walks down
    the pyramid and a global average feeds an affine head
    """

    def __init__(self, config: ModelConfig, pyramid: GraphPyramid, rng: np.random.Generator):
        super().__init__()
        self.config, self.pyramid = config, pyramid
        plans = list(reversed(block_schedule(config, pyramid)))
        self.embedding = ClassEmbedding(config.num_classes, config.embed_dim, rng)
        channels = [config.channels + config.embed_dim] + [plan.in_channels for plan in plans]
        self.blocks = [
            DiscriminatorBlock(plan, channels[i], channels[i + 1], pyramid, config.kernel_size, config.residual, rng)
            for i, plan in enumerate(plans)
        ]
        self.head = Linear(channels[-1], 1, rng)

    @property
    def input_shape(self) -> t.Tuple[int, int, int]:
        return self.config.channels, self.config.frames, self.pyramid.finest.size

    def forward(self, X: Tensor, labels: t.Union[np.ndarray, t.Sequence[int]]) -> Tensor:
        if X.ndim != 4 or tuple(X.shape[1:]) != self.input_shape:
            raise ShapeError(f"Discriminator expects [batch, *{self.input_shape}], got {X.shape}")
        embedded = self.embedding(labels)
        if embedded.shape[0] != X.shape[0]:
            raise ShapeError(f"{X.shape[0]} sequences but {embedded.shape[0]} labels")
        batch, _, frames, joints = X.shape
        broadcast = expand(embedded.reshape(batch, self.config.embed_dim, 1, 1), (batch, self.config.embed_dim, frames, joints))
        H = concat([X, broadcast], axis=1)
        for block in self.blocks:
            H = block(H)
        return self.head(H.mean(axis=(2, 3))).reshape(batch)


def criticize(discriminator: Discriminator, X: Tensor, labels: t.Union[np.ndarray, t.Sequence[int]]) -> Tensor:
    """
    Critic score per sample, shape [batch]
    """
    return discriminator(X, labels)


class GraphConvUnit(Module):
    def __init__(self, in_channels: int, out_channels: int, pyramid: GraphPyramid, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        self.spatial = SpatialGraphConv(in_channels, out_channels, pyramid.finest.adjacency, rng)
        self.temporal = TemporalConv(out_channels, out_channels, kernel_size, rng)

    def forward(self, X: Tensor) -> Tensor:
        return relu(self.temporal(self.spatial(X)))


class ActionClassifier(Module):
    """
    Small spatiotemporal graph-convolution action classifier on the finest
    level. Its pooled penultimate activations are the Fréchet distance features.
    """

    def __init__(self, config: ModelConfig, pyramid: GraphPyramid, rng: np.random.Generator):
        super().__init__()
        self.config, self.pyramid = config, pyramid
        widths = [config.channels] + list(config.classifier_widths)
        self.units = [GraphConvUnit(a, b, pyramid, config.kernel_size, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.head = Linear(widths[-1], config.num_classes, rng)

    @property
    def feature_dim(self) -> int:
        return self.config.classifier_widths[-1]

    def features(self, X: Tensor) -> Tensor:
        for unit in self.units:
            X = unit(X)
        return X.mean(axis=(2, 3))

    def forward(self, X: Tensor) -> Tensor:
        return self.head(self.features(X))


@dataclass
class TruncationConfig:
    """
    ψ and the centre of W the latents are pulled towards
    """

    psi: float = 1.0
    center: t.Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= float(self.psi) <= 1.0:
            raise ConfigValidationError(f"Truncation psi must lie in [0, 1], got {self.psi}")


def estimate_center(
    generator: Generator,
    seed: int,
    label: t.Optional[int] = None,
    samples: int = 1000,
) -> np.ndarray:
    """
    Mean of the mapping outputs over `samples` latents. Without a label the
    classes are cycled uniformly.
    """
    streams = RandomStreams(seed)
    z = streams.normal("truncation.center", (samples, generator.config.latent_dim))
    if label is None:
        labels = np.arange(samples) % generator.config.num_classes
    else:
        labels = np.full(samples, int(label))
    with no_grad():
        w = generator.map_latent(z, labels)
    return w.data.mean(axis=0)


def truncate(w: Tensor, config: TruncationConfig) -> Tensor:
    """
    w' = center + ψ (w - center)

    Raises:
        ConfigValidationError: ψ outside [0, 1] or no centre estimated
    """
    psi = float(config.psi)
    if not 0.0 <= psi <= 1.0:
        raise ConfigValidationError(f"Truncation psi must lie in [0, 1], got {psi}")
    if psi == 1.0:
        return w
    if config.center is None:
        raise ConfigValidationError("Truncation needs an estimated centre, call `estimate_center` first")
    center = Tensor(np.asarray(config.center, dtype=w.dtype))
    return center + psi * (w - center)


def audit_batchnorm(generator: t.Optional[Generator] = None, discriminator: t.Optional[Discriminator] = None) -> t.List[str]:
    """
    Lists every normalisation layer that sits inside a spatially upsampling
    generator block or anywhere in the discriminator. Empty means compliant.
    """
    violations = []
    if generator is not None:
        for block in generator.blocks:
            if block.plan.spatial and any(isinstance(m, BatchNorm) for m in block.modules()):
                violations.append(
                    f"generator block {block.plan.index} upsamples {block.plan.level_in}->{block.plan.level_out} and normalises"
                )
    if discriminator is not None:
        for path, module in _walk(discriminator):
            if isinstance(module, BatchNorm):
                violations.append(f"discriminator normalises at '{path}'")
    return violations


def _walk(module: Module, prefix: str = "") -> t.Iterator[t.Tuple[str, Module]]:
    yield prefix or "<root>", module
    for name, child in module.children():
        yield from _walk(child, f"{prefix}{name}.")


# DEV: Add models with names as key-value pair
ModelFactory: t.Dict[str, t.Type[Module]] = {
    "generator": Generator,
    "discriminator": Discriminator,
    "classifier": ActionClassifier,
}


def build_model(name: str, config: ModelConfig, seed: int, pyramid: t.Optional[GraphPyramid] = None, **kwargs) -> Module:
    """
    Instantiates a registered model with weights drawn from the `init.<name>` stream

    Args:
        name (str): Key of `ModelFactory`
        config (ModelConfig): Architecture settings
        seed (int): Run seed
        pyramid (t.Optional[GraphPyramid]): Defaults to the bundled pyramid named in `config`

    Returns:
        Module: The model in training mode
    """
    if name not in ModelFactory:
        raise ConfigValidationError(f"{name} not available. Choose one of {sorted(ModelFactory)}")
    pyramid = pyramid if pyramid is not None else load_pyramid(config.pyramid)
    rng = RandomStreams(seed).generator(f"init.{name}")
    return ModelFactory[name](config, pyramid, rng, **kwargs)


def validate_model_config(config: Box) -> None:
    model_config = config.model
    for key in ("num_classes", "pyramid", "channels", "frames", "widths"):
        if key not in model_config:
            raise ConfigValidationError(f"model.{key} is required")
    try:
        pyramid = load_pyramid(str(model_config.pyramid))
    except GraphDefinitionError as e:
        raise ConfigValidationError(f"model.pyramid: {e}") from e
    if model_config.get("batchnorm", "no_upsample") not in BATCHNORM_POLICIES:
        raise ConfigValidationError(f"model.batchnorm must be one of {BATCHNORM_POLICIES}")
    if int(model_config.channels) not in (2, 3):
        raise ConfigValidationError("model.channels must be 2 (local 2D) or 3 (global 3D)")
    for key in ("num_classes", "frames", "latent_dim", "embed_dim", "w_dim"):
        if key in model_config and int(model_config[key]) < 1:
            raise ConfigValidationError(f"model.{key} must be a positive integer")
    if any(int(c) < 1 for c in model_config.widths):
        raise ConfigValidationError("model.widths must be positive channel counts")
    kernel = int(model_config.get("kernel_size", 9))
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigValidationError("model.kernel_size must be an odd positive integer")
    if int(model_config.get("mapping_depth", 4)) < 0:
        raise ConfigValidationError("model.mapping_depth must be non-negative")
    if len(model_config.widths) < len(pyramid) - 1:
        raise ConfigValidationError(
            f"model.widths defines {len(model_config.widths)} blocks but pyramid '{pyramid.name}' needs {len(pyramid) - 1}"
        )
