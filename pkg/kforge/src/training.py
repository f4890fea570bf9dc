"""
Conditional WGAN-GP training: critic and generator steps, the training loop
with checkpoints and the run log, and the feature classifier fit
"""

import json
import time
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from box import Box
from prefect.logging import get_logger
from kforge.src.exceptions import CheckpointError, ConfigValidationError, DivergenceError, ShapeError
from kforge.src.model import ActionClassifier, Discriminator, Generator
from kforge.src.optim import AdamState, adam_step, load_checkpoint, save_checkpoint
from kforge.src.tensor import RandomStreams, Tensor, grad, log_softmax, no_grad, sqrt

logger = get_logger("kforge.training")

Critic = t.Callable[[Tensor, np.ndarray], Tensor]
Snapshot = t.Callable[[int, Generator], t.Dict[str, float]]
NONDETERMINISTIC_FIELDS = ("wall_time",)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    n_critic: int = 5
    gp_weight: float = 10.0
    divergence_threshold: float = 1e6
    log_every: int = 50
    checkpoint_every: int = 1000
    eval_every: int = 0
    adam: t.Dict[str, float] = field(default_factory=dict)
    classifier_steps: int = 300
    classifier_batch_size: int = 32
    classifier_lr: float = 1e-3

    def __post_init__(self):
        if not self.gp_weight >= 0:
            raise ConfigValidationError("train.gp_weight must be non-negative")
        if self.n_critic < 1:
            raise ConfigValidationError("train.n_critic must be at least 1")
        if self.batch_size < 2:
            raise ConfigValidationError("train.batch_size must be at least 2")
        if self.steps < 0:
            raise ConfigValidationError("train.steps must be non-negative")

    @classmethod
    def from_config(cls, train_config: t.Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        values = {k: v for k, v in dict(train_config).items() if k in known}
        if "adam" in values:
            values["adam"] = dict(values["adam"])
        return cls(**values)


@dataclass
class TrainingState:
    """
    Everything a resumed run needs: both models, both optimizers and the
    number of completed generator steps
    """

    generator: Generator
    discriminator: Discriminator
    g_optim: AdamState
    d_optim: AdamState
    step: int = 0

    def arrays(self) -> t.Dict[str, np.ndarray]:
        arrays = self.generator.state_arrays("generator.")
        arrays.update(self.discriminator.state_arrays("discriminator."))
        arrays.update(self.g_optim.arrays("optim.generator"))
        arrays.update(self.d_optim.arrays("optim.discriminator"))
        return arrays

    def load(self, arrays: t.Mapping[str, np.ndarray], step: int) -> None:
        try:
            self.generator.load_arrays(arrays, "generator.")
            self.discriminator.load_arrays(arrays, "discriminator.")
        except ShapeError as e:
            raise CheckpointError(f"Checkpoint does not fit the configured models: {e}") from e
        self.g_optim.restore(arrays, "optim.generator")
        self.d_optim.restore(arrays, "optim.discriminator")
        self.step = int(step)


class RunLog:
    """
    Line-delimited JSON telemetry, one record per generator step
    """

    def __init__(self, path: t.Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.records: t.List[t.Dict[str, t.Any]] = []

    def append(self, record: t.Dict[str, t.Any]) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError(f"Run log steps must increase, got {record['step']} after {self.records[-1]['step']}")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f_out:
                f_out.write(json.dumps(record, sort_keys=True) + "\n")

    def truncate(self, step: int) -> None:
        """
        Drops records after `step` (used when resuming)
        """
        self.records = [r for r in self.records if r["step"] <= step]
        if self.path is not None:
            self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))

    @classmethod
    def load(cls, path: t.Union[str, Path]) -> "RunLog":
        run_log = cls(Path(path))
        if run_log.path.is_file():
            run_log.records = [json.loads(line) for line in run_log.path.read_text().splitlines() if line.strip()]
        return run_log

    def comparable(self) -> t.List[t.Dict[str, t.Any]]:
        """
        Records without wall-clock fields, for determinism checks
        """
        return [{k: v for k, v in r.items() if k not in NONDETERMINISTIC_FIELDS} for r in self.records]


def _global_norm(grads: t.Sequence[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g.data, dtype=np.float64))) for g in grads)))


def _check_loss(name: str, value: float, threshold: float, step: int) -> None:
    if not np.isfinite(value) or abs(value) > threshold:
        logger.error(f"{name} loss {value} at step {step} exceeded the divergence guard ({threshold:g})")
        raise DivergenceError(f"{name} loss diverged at step {step}: {value}")


def gradient_penalty(
    critic: Critic,
    x_real: Tensor,
    x_fake: Tensor,
    labels: np.ndarray,
    epsilon: np.ndarray,
) -> t.Tuple[Tensor, float]:
    """
    Mean over the batch of (||∇ D(x̂|y)|| - 1)² at x̂ = ε real + (1 - ε) fake.
    The input gradient is taken with `create_graph=True`, so the returned
    penalty is differentiable with respect to the critic's parameters.

    Args:
        critic (Critic): Maps (inputs, labels) to one score per sample
        x_real (Tensor): Real batch
        x_fake (Tensor): Generated batch of the same shape
        labels (np.ndarray): Class ids shared by both batches
        epsilon (np.ndarray): One interpolation weight per sample

    Raises:
        ShapeError: Batch shapes differ or epsilon does not have one entry per sample
        NonFiniteError: The input gradient holds NaN/Inf

    Returns:
        t.Tuple[Tensor, float]: Penalty and the mean input-gradient norm
    """
    if x_real.shape != x_fake.shape:
        raise ShapeError(f"Real batch {x_real.shape} and fake batch {x_fake.shape} differ")
    batch = x_real.shape[0]
    epsilon = np.asarray(epsilon, dtype=x_real.dtype).reshape(-1)
    if epsilon.size != batch:
        raise ShapeError(f"Need one interpolation weight per sample ({batch}), got {epsilon.size}")
    eps = epsilon.reshape((batch,) + (1,) * (x_real.ndim - 1))
    x_hat = Tensor(eps * x_real.data + (1 - eps) * x_fake.data, requires_grad=True)
    scores = critic(x_hat, labels)
    (g,) = grad(scores.sum(), [x_hat], create_graph=True)
    norms = sqrt((g * g).sum(axis=tuple(range(1, g.ndim))) + 1e-12)
    return ((norms - 1.0) ** 2).mean(), float(np.mean(norms.data))


def critic_loss(
    critic: Critic,
    x_real: Tensor,
    x_fake: Tensor,
    labels: np.ndarray,
    epsilon: np.ndarray,
    gp_weight: float,
) -> t.Tuple[Tensor, Tensor, Tensor, float]:
    """
    E[D(fake)] - E[D(real)] + λ·penalty

    Returns:
        t.Tuple[Tensor, Tensor, Tensor, float]: Loss, Wasserstein term, penalty and the mean input-gradient norm
    """
    wasserstein = critic(x_fake, labels).mean() - critic(x_real, labels).mean()
    penalty, input_grad_norm = gradient_penalty(critic, x_real, x_fake, labels, epsilon)
    return wasserstein + gp_weight * penalty, wasserstein, penalty, input_grad_norm


def _noise_seed(streams: RandomStreams, stream: str, counter: int) -> int:
    return int(streams.generator(stream, counter).integers(2**31))


def critic_step(
    state: TrainingState,
    x_real: Tensor,
    labels: np.ndarray,
    config: TrainConfig,
    streams: RandomStreams,
    counter: int,
) -> t.Dict[str, float]:
    """
    One Adam step on E[D(fake)] - E[D(real)] + λ·penalty. Fakes come from the
    frozen generator with fresh latents and the real batch's labels.

    Raises:
        DivergenceError: NaN loss or |loss| above the divergence guard
    """
    generator, discriminator = state.generator, state.discriminator
    batch = x_real.shape[0]
    z = streams.normal("train.critic.z", (batch, generator.config.latent_dim), counter)
    with no_grad():
        x_fake = generator(z, labels, _noise_seed(streams, "train.critic.noise", counter))
    x_fake = Tensor(x_fake.data.astype(x_real.dtype))
    epsilon = streams.generator("train.critic.epsilon", counter).random(batch)

    loss, wasserstein, penalty, input_grad_norm = critic_loss(discriminator, x_real, x_fake, labels, epsilon, config.gp_weight)
    _check_loss("Critic", loss.item(), config.divergence_threshold, state.step)

    params = discriminator.named_parameters(trainable_only=True)
    grads = grad(loss, list(params.values()), allow_unused=True)
    adam_step(params, dict(zip(params, grads)), state.d_optim)
    return {
        "critic_loss": loss.item(),
        "wasserstein": wasserstein.item(),
        "penalty": penalty.item(),
        "input_grad_norm": input_grad_norm,
        "critic_grad_norm": _global_norm(grads),
    }


def generator_step(
    state: TrainingState,
    labels: np.ndarray,
    config: TrainConfig,
    streams: RandomStreams,
    counter: int,
) -> t.Dict[str, float]:
    """
    One Adam step on -E[D(G(z, y) | y)] over generator, mapping and embedding
    parameters; the discriminator is left untouched
    """
    generator, discriminator = state.generator, state.discriminator
    z = streams.normal("train.generator.z", (len(labels), generator.config.latent_dim), counter)
    x_fake = generator(z, labels, _noise_seed(streams, "train.generator.noise", counter))
    loss = -discriminator(x_fake, labels).mean()
    _check_loss("Generator", loss.item(), config.divergence_threshold, state.step)

    params = generator.named_parameters(trainable_only=True)
    grads = grad(loss, list(params.values()), allow_unused=True)
    adam_step(params, dict(zip(params, grads)), state.g_optim)
    return {"generator_loss": loss.item(), "generator_grad_norm": _global_norm(grads)}


def _sample_batch(
    X: np.ndarray, labels: np.ndarray, batch_size: int, streams: RandomStreams, stream: str, counter: int
) -> t.Tuple[Tensor, np.ndarray]:
    rng = streams.generator(stream, counter)
    index = rng.choice(len(X), size=batch_size, replace=len(X) < batch_size)
    return Tensor(X[index]), labels[index]


class LearnLab:
    @staticmethod
    def build_state(generator: Generator, discriminator: Discriminator, config: TrainConfig) -> TrainingState:
        return TrainingState(
            generator=generator,
            discriminator=discriminator,
            g_optim=AdamState.from_config(config.adam),
            d_optim=AdamState.from_config(config.adam),
        )

    @staticmethod
    def save(state: TrainingState, checkpoint_dir: Path, metadata: t.Dict) -> Path:
        metadata = dict(metadata, step=state.step, g_optim_step=state.g_optim.step, d_optim_step=state.d_optim.step)
        return save_checkpoint(Path(checkpoint_dir) / f"step_{state.step}", state.arrays(), metadata)

    @staticmethod
    def resume(state: TrainingState, checkpoint: t.Union[str, Path]) -> t.Dict:
        """
        Loads model and optimizer values of `checkpoint` into `state`

        Returns:
            t.Dict: The checkpoint metadata
        """
        arrays, metadata = load_checkpoint(checkpoint)
        state.load(arrays, metadata.get("step", 0))
        logger.info(f"Resumed from {checkpoint} at step {state.step}")
        return metadata

    @staticmethod
    def latest_checkpoint(checkpoint_dir: Path) -> t.Optional[Path]:
        stems = sorted(Path(checkpoint_dir).glob("step_*.manifest"), key=lambda p: int(p.stem.split("_")[1]))
        return stems[-1].with_suffix("") if stems else None

    @staticmethod
    def train(
        state: TrainingState,
        X: np.ndarray,
        labels: np.ndarray,
        config: TrainConfig,
        seed: int,
        run_log: RunLog,
        checkpoint_dir: t.Optional[Path] = None,
        metadata: t.Optional[t.Dict] = None,
        snapshot: t.Optional[Snapshot] = None,
    ) -> TrainingState:
        """
        Alternates `n_critic` critic steps with one generator step until
        `config.steps` generator steps are done. Every random draw is keyed by
        the step counter, so a resumed run continues exactly like an
        uninterrupted one.

        Args:
            state (TrainingState): Models and optimizers, possibly resumed
            X (np.ndarray): Real sequences [M, C, T, N]
            labels (np.ndarray): Class ids [M]
            config (TrainConfig): Training settings
            seed (int): Run seed
            run_log (RunLog): Telemetry sink
            checkpoint_dir (t.Optional[Path]): Where `step_<k>` checkpoints go
            metadata (t.Optional[t.Dict]): Extra checkpoint metadata (config fingerprint)
            snapshot (t.Optional[Snapshot]): Called every `eval_every` steps for metric snapshots

        Raises:
            ConfigValidationError: Empty dataset
            DivergenceError: Runaway or NaN losses

        Returns:
            TrainingState: State after the last generator step
        """
        if len(X) == 0:
            raise ConfigValidationError("Cannot train on an empty dataset")
        if len(X) != len(labels):
            raise ShapeError(f"{len(X)} sequences but {len(labels)} labels")
        metadata = dict(metadata or {}, seed=seed)
        streams = RandomStreams(seed)
        state.generator.train()
        state.discriminator.train()
        if checkpoint_dir is not None and state.step == 0:
            LearnLab.save(state, checkpoint_dir, metadata)

        while state.step < config.steps:
            start = time.perf_counter()
            critic_records = []
            for j in range(config.n_critic):
                counter = state.step * config.n_critic + j
                x_real, y = _sample_batch(X, labels, config.batch_size, streams, "train.critic.batch", counter)
                critic_records.append(critic_step(state, x_real, y, config, streams, counter))
            _, y = _sample_batch(X, labels, config.batch_size, streams, "train.generator.batch", state.step)
            g_record = generator_step(state, y, config, streams, state.step)
            state.step += 1

            record = {
                "step": state.step,
                "critic_steps": len(critic_records),
                **{k: float(np.mean([r[k] for r in critic_records])) for k in critic_records[0]},
                **g_record,
                "wall_time": time.perf_counter() - start,
            }
            if snapshot is not None and config.eval_every and state.step % config.eval_every == 0:
                record["metrics"] = snapshot(state.step, state.generator)
                state.generator.train()
            run_log.append(record)
            if config.log_every and state.step % config.log_every == 0:
                logger.info(
                    f"step {state.step}: critic {record['critic_loss']:.4f} "
                    f"(penalty {record['penalty']:.4f}), generator {record['generator_loss']:.4f}"
                )
            if checkpoint_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                LearnLab.save(state, checkpoint_dir, metadata)

        if checkpoint_dir is not None:
            LearnLab.save(state, checkpoint_dir, metadata)
        return state

    @staticmethod
    def fit_classifier(
        classifier: ActionClassifier,
        X: np.ndarray,
        labels: np.ndarray,
        config: TrainConfig,
        seed: int,
    ) -> t.List[float]:
        """
        Softmax cross-entropy training of the feature classifier on real data

        Returns:
            t.List[float]: Loss per step
        """
        if len(X) == 0:
            raise ConfigValidationError("Cannot fit the classifier on an empty dataset")
        streams = RandomStreams(seed)
        optim = AdamState(lr=config.classifier_lr, beta1=0.9, beta2=0.999)
        params = classifier.named_parameters(trainable_only=True)
        num_classes = classifier.config.num_classes
        history = []
        classifier.train()
        for step in range(config.classifier_steps):
            x, y = _sample_batch(X, labels, min(config.classifier_batch_size, len(X)), streams, "classifier.batch", step)
            one_hot = np.eye(num_classes, dtype=x.dtype)[y]
            loss = -(log_softmax(classifier(x), axis=1) * one_hot).sum() / float(len(y))
            _check_loss("Classifier", loss.item(), config.divergence_threshold, step)
            grads = grad(loss, list(params.values()), allow_unused=True)
            adam_step(params, dict(zip(params, grads)), optim)
            history.append(loss.item())
        classifier.eval()
        logger.info(f"Feature classifier fitted, final loss {history[-1] if history else float('nan'):.4f}")
        return history


def validate_train_config(config: Box) -> None:
    train_config = config.get("train")
    if train_config is None:
        raise ConfigValidationError("train section is required")
    TrainConfig.from_config(train_config)
    AdamState.from_config(train_config.get("adam", {}))
    unknown = set(train_config) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigValidationError(f"Unknown train keys {sorted(unknown)}")
