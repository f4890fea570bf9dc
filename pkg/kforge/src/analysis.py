"""
Sampling from a trained generator and the studies run on it: truncation
trend, stochastic variation and conditioning accuracy
"""

import typing as t
from contextlib import contextmanager, nullcontext
from dataclasses import asdict, dataclass

import numpy as np
from box import Box
from prefect.logging import get_logger
from scipy.stats import spearmanr
from sklearn.metrics import accuracy_score
from kforge.src.data import spectral_oracle
from kforge.src.exceptions import ConfigValidationError, InvalidClassError
from kforge.src.layers import NoiseInjection
from kforge.src.model import Generator, TruncationConfig, estimate_center, truncate
from kforge.src.tensor import RandomStreams, Tensor, no_grad

logger = get_logger("kforge.analysis")

DEFAULT_PSIS = (1.0, 0.8, 0.6, 0.4, 0.2, 0.0)


def _check_label(generator: Generator, label: int) -> int:
    if not 0 <= int(label) < generator.config.num_classes:
        raise InvalidClassError(f"Class id {label} outside [0, {generator.config.num_classes})")
    return int(label)


def latents(generator: Generator, count: int, seed: int, stream: str = "generate.z") -> Tensor:
    return RandomStreams(seed).normal(stream, (count, generator.config.latent_dim))


def generate_sequences(
    generator: Generator,
    labels: t.Sequence[int],
    seed: int,
    psi: float = 1.0,
    noise_seed: t.Optional[int] = None,
    centers: t.Optional[t.Dict[int, np.ndarray]] = None,
    shared_noise: bool = True,
    batch_size: int = 64,
    center_samples: int = 1000,
) -> np.ndarray:
    """
    Draws one latent per label and synthesises the sequences in inference mode.

    With `shared_noise` every sample sees the same noise realisation
    (`noise_seed`), so at ψ = 0 all samples of a class are identical. Otherwise
    samples are batched and each row draws its own noise.

    Args:
        generator (Generator): Trained generator
        labels (t.Sequence[int]): Requested class per sample
        seed (int): Latent seed
        psi (float): Truncation factor in [0, 1]
        noise_seed (t.Optional[int]): Noise seed, defaults to `seed`
        centers (t.Optional[t.Dict[int, np.ndarray]]): Precomputed per-class centres of W
        shared_noise (bool): One noise realisation for all samples
        batch_size (int): Rows per forward pass when noise is not shared
        center_samples (int): Latents averaged per missing class centre

    Raises:
        InvalidClassError: Label outside the generator's classes

    Returns:
        np.ndarray: Sequences [len(labels), C, T, N]
    """
    labels = np.array([_check_label(generator, y) for y in labels], dtype=np.int64)
    noise_seed = seed if noise_seed is None else noise_seed
    centers = dict(centers or {})
    if psi != 1.0:
        for label in np.unique(labels):
            if int(label) not in centers:
                centers[int(label)] = estimate_center(generator, seed, int(label), samples=center_samples)
    generator.eval()
    z = latents(generator, len(labels), seed)
    with no_grad():
        w = generator.map_latent(z, labels)
        rows = []
        for label in np.unique(labels):
            index = np.flatnonzero(labels == label)
            config = TruncationConfig(psi=psi, center=centers.get(int(label)))
            rows.append((index, truncate(Tensor(w.data[index]), config).data))
        w_truncated = np.empty_like(w.data)
        for index, values in rows:
            w_truncated[index] = values
        if shared_noise:
            out = [generator.synthesize(Tensor(w_truncated[i : i + 1]), noise_seed).data for i in range(len(labels))]
        else:
            out = [
                generator.synthesize(Tensor(w_truncated[s : s + batch_size]), noise_seed + s).data
                for s in range(0, len(labels), batch_size)
            ]
    return np.concatenate(out, axis=0) if out else np.empty((0,) + generator.output_shape)


@contextmanager
def silenced_noise(generator: Generator) -> t.Iterator[Generator]:
    """
    Temporarily sets every noise weight to zero
    """
    saved = [(m, m.weight.data.copy()) for m in generator.modules() if isinstance(m, NoiseInjection)]
    try:
        for module, values in saved:
            module.weight.assign(np.zeros_like(values))
        yield generator
    finally:
        for module, values in saved:
            module.weight.assign(values)


def stochastic_variation(
    generator: Generator,
    label: int,
    seed: int,
    realizations: int = 100,
    zero_noise: bool = False,
) -> np.ndarray:
    """
    Per-joint standard deviation over `realizations` noise draws with one
    fixed w, averaged over channels and frames

    Returns:
        np.ndarray: One value per joint [N]
    """
    if realizations < 2:
        raise ConfigValidationError("Stochastic variation needs at least 2 realisations")
    label = _check_label(generator, label)
    generator.eval()
    with no_grad():
        w = generator.map_latent(latents(generator, 1, seed, "study.variation.z"), [label])
        with silenced_noise(generator) if zero_noise else nullcontext(generator):
            outputs = np.stack([generator.synthesize(w, noise_seed=r).data[0] for r in range(realizations)])
    return outputs.astype(np.float64).std(axis=0).mean(axis=(0, 1))


@dataclass
class TruncationTrend:
    psis: t.List[float]
    variances: t.List[float]
    spearman: float
    non_increasing: bool

    def to_dict(self) -> t.Dict[str, t.Any]:
        return asdict(self)


def truncation_trend(
    generator: Generator,
    seed: int,
    label: int = 0,
    psis: t.Sequence[float] = DEFAULT_PSIS,
    num_latents: int = 256,
    noise_seed: int = 0,
    center_samples: int = 1000,
) -> TruncationTrend:
    """
    Mean per-joint trajectory variance across `num_latents` fixed latents for
    every ψ, with one shared noise realisation

    Returns:
        TruncationTrend: Variances in `psis` order and Spearman's ρ between ψ and variance
    """
    label = _check_label(generator, label)
    centers = {label: estimate_center(generator, seed, label, center_samples)}
    variances = []
    for psi in psis:
        X = generate_sequences(generator, [label] * num_latents, seed, psi, noise_seed, centers)
        variances.append(float(X.astype(np.float64).var(axis=0).mean()))
    order = np.argsort(-np.asarray(psis, dtype=np.float64), kind="stable")
    ordered = np.asarray(variances)[order]
    non_increasing = bool(np.all(np.diff(ordered) <= 1e-12 * max(1.0, float(np.max(np.abs(ordered))))))
    rho = float(spearmanr(psis, variances).correlation) if np.ptp(variances) > 0 else float("nan")
    logger.info(f"Truncation trend over psi {list(psis)}: variances {variances}, spearman {rho:.3f}")
    return TruncationTrend(psis=[float(p) for p in psis], variances=variances, spearman=rho, non_increasing=non_increasing)


def conditioning_accuracy(
    generator: Generator,
    bands: t.Sequence[t.Tuple[float, float]],
    seed: int,
    per_class: int = 64,
    psi: float = 1.0,
) -> float:
    """
    Share of generated samples the spectral oracle assigns to their requested class
    """
    if len(bands) != generator.config.num_classes:
        raise ConfigValidationError(f"{len(bands)} frequency bands for {generator.config.num_classes} classes")
    labels = np.repeat(np.arange(generator.config.num_classes), per_class)
    X = generate_sequences(generator, labels, seed, psi, shared_noise=False)
    return float(accuracy_score(labels, spectral_oracle(X, bands)))


def validate_generate_config(config: Box) -> None:
    generate_config = config.get("generate")
    if generate_config is None:
        return None
    allowed = {"psi", "count", "noise_seed", "center_samples", "render_stride"}
    unknown = set(generate_config) - allowed
    if unknown:
        raise ConfigValidationError(f"Unknown generate keys {sorted(unknown)}")
    TruncationConfig(psi=float(generate_config.get("psi", 1.0)))
    for key in ("count", "center_samples", "render_stride"):
        if key in generate_config and int(generate_config[key]) < 1:
            raise ConfigValidationError(f"generate.{key} must be a positive integer")
