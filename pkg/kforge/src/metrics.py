"""
Distribution distances between real and generated sequences: unbiased MMD
(frame-wise and whole-sequence) and the Fréchet distance over features
"""

import hashlib
import json
import typing as t
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from box import Box
from prefect.logging import get_logger
from scipy.spatial.distance import cdist, pdist
from kforge.src.exceptions import ConfigValidationError, MetricError, ShapeError
from kforge.src.tensor import Tensor, no_grad

logger = get_logger("kforge.metrics")

MIN_SAMPLES = 2


def _fingerprint(payload: t.Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class KernelConfig:
    """
    Gaussian RBF mixture k(x, y) = sum_s exp(-||x - y||² / (2 σ_s²)).

    With `relative=True` each σ_s is `scale * median pairwise distance` of the
    pooled samples (1 when that median is zero), otherwise the scales are
    absolute bandwidths.
    """

    scales: t.Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    relative: bool = True

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise MetricError(f"Kernel bandwidth scales must be positive, got {self.scales}")

    @property
    def fingerprint(self) -> str:
        return _fingerprint({"family": "rbf", "scales": list(self.scales), "relative": self.relative})

    def bandwidths(self, pooled: np.ndarray) -> np.ndarray:
        scales = np.asarray(self.scales, dtype=np.float64)
        if not self.relative:
            return scales
        median = float(np.median(pdist(pooled, "euclidean"))) if len(pooled) > 1 else 0.0
        return scales * (median if median > 0 else 1.0)


@dataclass(frozen=True)
class MMDValue:
    """
    Reported MMD: square root of the clamped estimate, with the raw
    (possibly negative) MMD² kept alongside
    """

    value: float
    raw: float

    @property
    def clamped(self) -> bool:
        return self.raw < 0

    @classmethod
    def from_raw(cls, raw: float, name: str) -> "MMDValue":
        if raw < 0:
            logger.warning(f"{name}: unbiased MMD² estimate {raw:.3e} is negative, reported as 0")
        return cls(value=float(np.sqrt(max(raw, 0.0))), raw=float(raw))


def _as_vectors(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(len(X), -1)


def mmd2_unbiased(X: np.ndarray, Y: np.ndarray, kernel: t.Optional[KernelConfig] = None) -> float:
    """
    Unbiased MMD² estimate summed over the bandwidth mixture: within-set sums
    exclude the diagonal, the cross sum is complete

    Args:
        X (np.ndarray): Samples [n, ...], flattened per sample
        Y (np.ndarray): Samples [m, ...]
        kernel (t.Optional[KernelConfig]): Defaults to the median-heuristic mixture

    Raises:
        MetricError: Fewer than two samples on either side
        ShapeError: Feature sizes differ

    Returns:
        float: MMD², possibly slightly negative
    """
    kernel = kernel or KernelConfig()
    X, Y = _as_vectors(X), _as_vectors(Y)
    n, m = len(X), len(Y)
    if n < MIN_SAMPLES or m < MIN_SAMPLES:
        raise MetricError(f"MMD needs at least {MIN_SAMPLES} samples per set, got {n} and {m}")
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"Sample sizes differ: {X.shape[1]} vs {Y.shape[1]}")

    d_xx, d_yy, d_xy = cdist(X, X, "sqeuclidean"), cdist(Y, Y, "sqeuclidean"), cdist(X, Y, "sqeuclidean")
    total = 0.0
    for sigma in kernel.bandwidths(np.vstack([X, Y])):
        k_xx, k_yy, k_xy = (np.exp(-0.5 * d / sigma**2) for d in (d_xx, d_yy, d_xy))
        total += (k_xx.sum() - np.trace(k_xx)) / (n * (n - 1))
        total += (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
        total -= 2.0 * k_xy.sum() / (n * m)
    return float(total)


def _check_sets(real: np.ndarray, fake: np.ndarray) -> None:
    if real.ndim != 4 or fake.ndim != 4:
        raise ShapeError(f"Expected sequence sets [n, C, T, N], got {real.shape} and {fake.shape}")
    if real.shape[1:] != fake.shape[1:]:
        raise ShapeError(f"Sequence shapes differ: {real.shape[1:]} vs {fake.shape[1:]}")


def frame_mmd2(real: np.ndarray, fake: np.ndarray, kernel: t.Optional[KernelConfig] = None) -> np.ndarray:
    """
    MMD² of the per-frame joint configurations, one value per frame index
    """
    real, fake = np.asarray(real), np.asarray(fake)
    _check_sets(real, fake)
    return np.array([mmd2_unbiased(real[:, :, f, :], fake[:, :, f, :], kernel) for f in range(real.shape[2])])


def mmd_actions(real: np.ndarray, fake: np.ndarray, kernel: t.Optional[KernelConfig] = None) -> MMDValue:
    """
    MMD_a: mean over frames of the frame-wise MMD², clamped at 0 and rooted
    """
    return MMDValue.from_raw(float(np.mean(frame_mmd2(real, fake, kernel))), "MMD_a")


def mmd_sequences(real: np.ndarray, fake: np.ndarray, kernel: t.Optional[KernelConfig] = None) -> MMDValue:
    """
    MMD_s: MMD² over whole flattened sequences, clamped at 0 and rooted
    """
    real, fake = np.asarray(real), np.asarray(fake)
    _check_sets(real, fake)
    return MMDValue.from_raw(mmd2_unbiased(real, fake, kernel), "MMD_s")


def sqrtm_psd(A: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """
    Square root of a symmetric positive semi-definite matrix via its
    eigendecomposition; eigenvalues within `tol` below zero are clamped

    Raises:
        MetricError: Non-square, asymmetric or clearly indefinite input
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise MetricError(f"sqrtm_psd needs a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))) if A.size else 1.0)
    if np.max(np.abs(A - A.T), initial=0.0) > tol * scale:
        raise MetricError("sqrtm_psd input is not symmetric")
    eigenvalues, eigenvectors = scipy.linalg.eigh(A)
    if eigenvalues.size and eigenvalues.min() < -tol * scale:
        raise MetricError(f"Matrix is not positive semi-definite (eigenvalue {eigenvalues.min():.3e})")
    roots = np.sqrt(np.clip(eigenvalues, 0.0, None))
    return (eigenvectors * roots) @ eigenvectors.T


def frechet_distance(
    mu_real: np.ndarray,
    sigma_real: np.ndarray,
    mu_fake: np.ndarray,
    sigma_fake: np.ndarray,
    eps: float = 1e-6,
) -> float:
    """
    ||μ_r - μ_f||² + Tr(Σ_r + Σ_f - 2 (Σ_r Σ_f)^(1/2)), with `eps`·I added to both
    covariances. The cross term is evaluated as Tr((√Σ_r Σ_f √Σ_r)^(1/2)),
    which keeps every square root on a symmetric PSD matrix.
    """
    mu_real, mu_fake = np.atleast_1d(mu_real).astype(np.float64), np.atleast_1d(mu_fake).astype(np.float64)
    sigma_real, sigma_fake = np.atleast_2d(sigma_real), np.atleast_2d(sigma_fake)
    if mu_real.shape != mu_fake.shape or sigma_real.shape != sigma_fake.shape:
        raise ShapeError("Feature moments of real and generated sets have different sizes")
    regularizer = eps * np.eye(len(mu_real))
    sigma_real, sigma_fake = sigma_real + regularizer, sigma_fake + regularizer
    root_real = sqrtm_psd(sigma_real)
    middle = root_real @ sigma_fake @ root_real
    cross = sqrtm_psd(0.5 * (middle + middle.T))
    diff = mu_real - mu_fake
    value = float(diff @ diff + np.trace(sigma_real) + np.trace(sigma_fake) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def feature_moments(features: np.ndarray) -> t.Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))


def fid(features_real: np.ndarray, features_fake: np.ndarray, eps: float = 1e-6) -> float:
    """
    Fréchet distance between Gaussian fits of two feature sets [n, d]

    Raises:
        MetricError: Fewer than two samples on either side
    """
    if len(features_real) < MIN_SAMPLES or len(features_fake) < MIN_SAMPLES:
        raise MetricError(
            f"FID needs at least {MIN_SAMPLES} samples per set, got {len(features_real)} and {len(features_fake)}"
        )
    return frechet_distance(*feature_moments(features_real), *feature_moments(features_fake), eps=eps)


class FlattenFeatures:
    """
    Identity features: every sequence flattened to one vector
    """

    fingerprint = _fingerprint({"extractor": "flatten"})

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return _as_vectors(X)


class ClassifierFeatures:
    """
    Pooled penultimate activations of a trained action classifier
    """

    def __init__(self, classifier, batch_size: int = 64):
        self.classifier = classifier
        self.batch_size = batch_size
        digest = hashlib.sha256()
        for path, param in sorted(classifier.named_parameters().items()):
            digest.update(path.encode())
            digest.update(param.data.tobytes())
        self.fingerprint = digest.hexdigest()[:16]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        self.classifier.eval()
        dtype = self.classifier.units[0].spatial.weight.dtype
        chunks = []
        with no_grad():
            for start in range(0, len(X), self.batch_size):
                batch = Tensor(np.asarray(X[start : start + self.batch_size], dtype=dtype))
                chunks.append(self.classifier.features(batch).data.astype(np.float64))
        return np.concatenate(chunks, axis=0)


@dataclass
class MetricsReport:
    fid: float
    mmd_a: float
    mmd_s: float
    mmd_a_raw: float
    mmd_s_raw: float
    n_real: int
    n_fake: int
    kernel_fingerprint: str
    feature_fingerprint: str
    dataset: str = ""
    model_checkpoint: str = ""
    flags: t.List[str] = field(default_factory=list)

    def to_json(self, path: t.Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def evaluate(
    real: np.ndarray,
    fake: np.ndarray,
    extractor: t.Optional[t.Callable[[np.ndarray], np.ndarray]] = None,
    kernel: t.Optional[KernelConfig] = None,
    dataset: str = "",
    model_checkpoint: str = "",
) -> MetricsReport:
    """
    FID, MMD_a and MMD_s of a generated set against a real set

    Raises:
        MetricError: Sample counts below the estimator minimums
    """
    real, fake = np.asarray(real), np.asarray(fake)
    if len(real) < MIN_SAMPLES or len(fake) < MIN_SAMPLES:
        raise MetricError(f"Evaluation needs at least {MIN_SAMPLES} real and generated samples, got {len(real)} and {len(fake)}")
    kernel = kernel or KernelConfig()
    extractor = extractor or FlattenFeatures()
    mmd_a, mmd_s = mmd_actions(real, fake, kernel), mmd_sequences(real, fake, kernel)
    flags = [name for name, value in (("mmd_a_clamped", mmd_a), ("mmd_s_clamped", mmd_s)) if value.clamped]
    return MetricsReport(
        fid=fid(extractor(real), extractor(fake)),
        mmd_a=mmd_a.value,
        mmd_s=mmd_s.value,
        mmd_a_raw=mmd_a.raw,
        mmd_s_raw=mmd_s.raw,
        n_real=len(real),
        n_fake=len(fake),
        kernel_fingerprint=kernel.fingerprint,
        feature_fingerprint=extractor.fingerprint,
        dataset=dataset,
        model_checkpoint=model_checkpoint,
        flags=flags,
    )


FEATURE_EXTRACTORS = ("classifier", "flatten")


def validate_evaluate_config(config: Box) -> None:
    evaluate_config = config.get("evaluate")
    if evaluate_config is None:
        return None
    allowed = {"samples", "split", "features", "kernel"}
    unknown = set(evaluate_config) - allowed
    if unknown:
        raise ConfigValidationError(f"Unknown evaluate keys {sorted(unknown)}")
    if int(evaluate_config.get("samples", MIN_SAMPLES)) < MIN_SAMPLES:
        raise ConfigValidationError(f"evaluate.samples must be at least {MIN_SAMPLES}")
    if evaluate_config.get("split", "eval") not in ("train", "eval"):
        raise ConfigValidationError("evaluate.split must be 'train' or 'eval'")
    if evaluate_config.get("features", "classifier") not in FEATURE_EXTRACTORS:
        raise ConfigValidationError(f"evaluate.features must be one of {FEATURE_EXTRACTORS}")
    kernel = evaluate_config.get("kernel") or {}
    try:
        KernelConfig(
            scales=tuple(float(s) for s in kernel.get("scales", KernelConfig.scales)),
            relative=bool(kernel.get("relative", True)),
        )
    except MetricError as e:
        raise ConfigValidationError(f"evaluate.kernel: {e}") from e
