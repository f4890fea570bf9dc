"""
Tests for the WGAN-GP objective and the training loop in kforge.src.training
"""
import numpy as np
import pytest
from box import Box
from kforge.src.exceptions import CheckpointError, ConfigValidationError, DivergenceError, ShapeError
from kforge.src.model import build_model
from kforge.src.tensor import RandomStreams, Tensor, einsum, grad_check, precision
from kforge.src.training import (
    LearnLab,
    RunLog,
    TrainConfig,
    critic_loss,
    critic_step,
    generator_step,
    gradient_penalty,
    validate_train_config,
)


def toy_data(count: int = 8, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((count, 2, 4, 2)).astype(np.float32)
    labels = np.arange(count) % 2
    return X, labels


def fresh_state(config, train_config: TrainConfig, seed: int = 0):
    generator = build_model("generator", config, seed=seed)
    discriminator = build_model("discriminator", config, seed=seed)
    return LearnLab.build_state(generator, discriminator, train_config)


@pytest.mark.parametrize("norm, expected", [(1.0, 0.0), (3.0, 4.0)])
def test_penalty_of_linear_critic(norm, expected):
    rng = np.random.default_rng(0)
    with precision("float64"):
        a = rng.standard_normal((2, 3, 4))
        a *= norm / np.linalg.norm(a)

        def critic(x, labels):
            return (x * a).sum(axis=(1, 2, 3))

        x_real = Tensor(rng.standard_normal((5, 2, 3, 4)))
        x_fake = Tensor(rng.standard_normal((5, 2, 3, 4)))
        penalty, mean_norm = gradient_penalty(critic, x_real, x_fake, np.zeros(5, dtype=int), rng.random(5))
    assert penalty.item() == pytest.approx(expected, abs=1e-9)
    assert mean_norm == pytest.approx(norm, abs=1e-9)


def test_penalty_parameter_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    with precision("float64"):
        W1 = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        w2 = Tensor(rng.standard_normal(3), requires_grad=True)

        def critic(x, labels):
            hidden = einsum("bi,ij->bj", x, W1)
            return einsum("bj,j->b", hidden * hidden, w2)

        x_real = Tensor(rng.standard_normal((3, 4)))
        x_fake = Tensor(rng.standard_normal((3, 4)))
        epsilon = rng.random(3)

        def fn():
            return gradient_penalty(critic, x_real, x_fake, np.zeros(3, dtype=int), epsilon)[0]

        assert grad_check(fn, [W1, w2]) < 1e-5


def test_penalty_shape_errors():
    critic = lambda x, labels: x.sum(axis=1)  # noqa: E731
    with pytest.raises(ShapeError):
        gradient_penalty(critic, Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), np.zeros(2), np.ones(2))
    with pytest.raises(ShapeError):
        gradient_penalty(critic, Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), np.zeros(2), np.ones(3))


def test_penalty_is_symmetric_at_midpoint(toy_config):
    X, labels = toy_data(8)
    discriminator = build_model("discriminator", toy_config, seed=3)
    a, b = Tensor(X[:4]), Tensor(X[4:])
    half = np.full(4, 0.5)
    forward, forward_norm = gradient_penalty(discriminator, a, b, labels[:4], half)
    swapped, swapped_norm = gradient_penalty(discriminator, b, a, labels[:4], half)
    assert forward.item() == swapped.item()
    assert forward_norm == swapped_norm


def test_wasserstein_term_vanishes_for_identical_batches(toy_config):
    X, labels = toy_data(4)
    discriminator = build_model("discriminator", toy_config, seed=0)
    x = Tensor(X)
    loss, wasserstein, penalty, _ = critic_loss(discriminator, x, x, labels, np.random.default_rng(0).random(4), 0.0)
    assert wasserstein.item() == 0.0
    assert loss.item() == 0.0
    assert np.isfinite(penalty.item())


def test_zero_critic_head_gives_zero_generator_gradients(toy_config):
    config = TrainConfig(batch_size=4)
    state = fresh_state(toy_config, config)
    head = state.discriminator.head.weight
    head.assign(np.zeros_like(head.data))
    before = state.generator.state_arrays()
    record = generator_step(state, np.array([0, 1, 0, 1]), config, RandomStreams(0), 0)
    assert record["generator_grad_norm"] == 0.0
    for path, values in state.generator.state_arrays().items():
        np.testing.assert_array_equal(values, before[path])


def test_each_step_updates_only_its_own_network(toy_config):
    X, labels = toy_data(4)
    config = TrainConfig(batch_size=4)
    state = fresh_state(toy_config, config)
    streams = RandomStreams(1)

    critic_before = state.discriminator.state_arrays()
    generator_before = state.generator.state_arrays()
    generator_step(state, labels, config, streams, 0)
    for path, values in state.discriminator.state_arrays().items():
        assert values.tobytes() == critic_before[path].tobytes()
    after_generator = state.generator.state_arrays()
    assert any(not np.array_equal(after_generator[p], generator_before[p]) for p in generator_before)
    assert (state.g_optim.step, state.d_optim.step) == (1, 0)

    critic_step(state, Tensor(X), labels, config, streams, 0)
    for path, values in state.generator.state_arrays().items():
        assert values.tobytes() == after_generator[path].tobytes()
    after_critic = state.discriminator.state_arrays()
    assert any(not np.array_equal(after_critic[p], critic_before[p]) for p in critic_before)
    assert (state.g_optim.step, state.d_optim.step) == (1, 1)


def test_critic_loss_falls_on_a_fixed_batch(toy_config):
    X, labels = toy_data(8)
    config = TrainConfig(batch_size=8, adam={"lr": 1e-3})
    falls = 0
    for seed in range(20):
        state = fresh_state(toy_config, config, seed=seed)
        streams = RandomStreams(seed)
        losses = [critic_step(state, Tensor(X), labels, config, streams, 0)["critic_loss"] for _ in range(100)]
        falls += losses[-1] < losses[0]
    assert falls >= 18


def test_train_config_validation():
    with pytest.raises(ConfigValidationError):
        TrainConfig(n_critic=0)
    with pytest.raises(ConfigValidationError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigValidationError):
        TrainConfig(gp_weight=-1.0)
    with pytest.raises(ConfigValidationError):
        validate_train_config(Box({"train": {"steps": 2, "learning_rate": 0.1}}))
    with pytest.raises(ConfigValidationError):
        validate_train_config(Box({"train": {"adam": {"lr": -1.0}}}))
    validate_train_config(Box({"train": {"steps": 2, "adam": {"lr": 1e-4}}}))


def test_run_log_is_ordered_json_lines(tmp_path):
    run_log = RunLog(tmp_path / "run_log.jsonl")
    run_log.append({"step": 1, "wall_time": 0.5, "critic_loss": 1.0})
    run_log.append({"step": 2, "wall_time": 0.7, "critic_loss": 0.5})
    with pytest.raises(ValueError):
        run_log.append({"step": 2})
    loaded = RunLog.load(tmp_path / "run_log.jsonl")
    assert loaded.records == run_log.records
    assert loaded.comparable() == [{"step": 1, "critic_loss": 1.0}, {"step": 2, "critic_loss": 0.5}]
    loaded.truncate(1)
    assert len(RunLog.load(tmp_path / "run_log.jsonl").records) == 1


def test_training_is_deterministic(toy_config):
    X, labels = toy_data()
    config = TrainConfig(steps=2, batch_size=4, n_critic=2, log_every=1, checkpoint_every=0)
    logs, states = [], []
    for _ in range(2):
        run_log = RunLog()
        states.append(LearnLab.train(fresh_state(toy_config, config), X, labels, config, seed=11, run_log=run_log))
        logs.append(run_log.comparable())
    assert logs[0] == logs[1]
    assert [r["step"] for r in logs[0]] == [1, 2]
    assert all(np.isfinite(r["critic_loss"]) and np.isfinite(r["generator_loss"]) for r in logs[0])
    for path, values in states[0].arrays().items():
        np.testing.assert_array_equal(states[1].arrays()[path], values)


def test_resumed_run_matches_uninterrupted_run(toy_config, tmp_path):
    X, labels = toy_data()
    full_config = TrainConfig(steps=4, batch_size=4, n_critic=2, checkpoint_every=2)
    full_log = RunLog()
    full = LearnLab.train(fresh_state(toy_config, full_config), X, labels, full_config, 5, full_log, tmp_path / "full")

    half_config = TrainConfig(steps=2, batch_size=4, n_critic=2, checkpoint_every=2)
    resumed_log = RunLog()
    LearnLab.train(fresh_state(toy_config, half_config), X, labels, half_config, 5, resumed_log, tmp_path / "half")
    checkpoint = LearnLab.latest_checkpoint(tmp_path / "half")
    assert checkpoint.name == "step_2"

    state = fresh_state(toy_config, full_config, seed=99)
    metadata = LearnLab.resume(state, checkpoint)
    assert metadata["step"] == 2 and metadata["seed"] == 5
    resumed = LearnLab.train(state, X, labels, full_config, 5, resumed_log, tmp_path / "half")

    assert resumed.step == full.step == 4
    assert resumed_log.comparable() == full_log.comparable()
    for path, values in full.arrays().items():
        np.testing.assert_array_equal(resumed.arrays()[path], values)


def test_zero_steps_only_writes_initial_checkpoint(toy_config, tmp_path):
    X, labels = toy_data()
    config = TrainConfig(steps=0, batch_size=4)
    run_log = RunLog()
    state = LearnLab.train(fresh_state(toy_config, config), X, labels, config, 0, run_log, tmp_path)
    assert state.step == 0
    assert run_log.records == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_0.bin", "step_0.json", "step_0.manifest"]


def test_divergence_guard_stops_training(toy_config):
    X, labels = toy_data()
    config = TrainConfig(steps=3, batch_size=4, n_critic=1, divergence_threshold=1e-12)
    with pytest.raises(DivergenceError):
        LearnLab.train(fresh_state(toy_config, config), X, labels, config, 0, RunLog())


def test_training_needs_data(toy_config):
    config = TrainConfig(steps=1, batch_size=4)
    with pytest.raises(ConfigValidationError):
        LearnLab.train(fresh_state(toy_config, config), np.zeros((0, 2, 4, 2)), np.zeros(0, dtype=int), config, 0, RunLog())


def test_checkpoint_from_other_architecture_is_rejected(toy_config, tiny_config, tmp_path):
    config = TrainConfig(steps=0, batch_size=4)
    LearnLab.save(fresh_state(tiny_config, config), tmp_path, {})
    with pytest.raises(CheckpointError):
        LearnLab.resume(fresh_state(toy_config, config), tmp_path / "step_0")


def test_classifier_fit_reports_every_step(toy_config):
    X, labels = toy_data()
    classifier = build_model("classifier", toy_config, seed=0)
    history = LearnLab.fit_classifier(classifier, X, labels, TrainConfig(classifier_steps=5, classifier_batch_size=4), seed=0)
    assert len(history) == 5
    assert np.all(np.isfinite(history))
    assert not classifier.training
