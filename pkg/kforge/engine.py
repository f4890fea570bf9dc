"""
Pipeline workflows for training, sampling and evaluating skeleton action generators.
This file has a whole range of functions that represent tasks of a run and the
command-line entry point wiring them together
"""

import argparse
import json
import sys
import typing as t
from pathlib import Path

import numpy as np
from box import Box
from prefect import flow, get_run_logger, task
from prefect.logging import get_logger
from prefect.utilities.annotations import quote
from kforge.src.analysis import conditioning_accuracy, generate_sequences, stochastic_variation, truncation_trend
from kforge.src.data import DataEngine, MotionDataset, MotionSample, SynthMotionConfig, export_sequence, import_sequence
from kforge.src.exceptions import CheckpointError, ConfigValidationError, KforgeError, ShapeError
from kforge.src.graph import load_pyramid
from kforge.src.metrics import ClassifierFeatures, FlattenFeatures, KernelConfig, evaluate
from kforge.src.model import Generator, ModelConfig, audit_batchnorm, build_model
from kforge.src.optim import load_checkpoint
from kforge.src.training import LearnLab, RunLog, TrainConfig
from kforge.src.utils import SNAPSHOT_NAME, Pilot, RunPaths
from kforge.src.visualize import Vizard

logger = get_logger("kforge.engine")


@task(
    name="setup_run",
    description="Validate the configuration, create the run directory and snapshot the effective config",
)
def setup_run(
    config_filepath: str,
    overrides: t.Sequence[str] = (),
    seed: t.Optional[int] = None,
    output_dir: t.Optional[str] = None,
    deterministic: bool = False,
) -> t.Tuple[Box, RunPaths]:
    return Pilot.setup(
        filepath=config_filepath,
        overrides=overrides,
        seed=seed,
        output_dir=output_dir,
        deterministic=deterministic,
    )


@task(name="build_dataset", description="Load, normalise, split and validate the motion dataset")
def build_dataset(config: Box, manifest_path: t.Optional[Path] = None) -> MotionDataset:
    dataset = DataEngine.build(config.data, seed=config.SEED)
    if manifest_path is not None:
        dataset.manifest.write_csv(manifest_path)
    return dataset


def _model_config(config: Box, dataset: t.Optional[MotionDataset] = None) -> ModelConfig:
    model_config = ModelConfig.from_config(config.model)
    if dataset is not None:
        expected = (model_config.channels, model_config.frames, load_pyramid(model_config.pyramid).finest.size)
        if tuple(dataset.X.shape[1:]) != expected:
            raise ConfigValidationError(
                f"Dataset sequences are {tuple(dataset.X.shape[1:])} but the model is configured for {expected}"
            )
        if dataset.num_classes > model_config.num_classes:
            raise ConfigValidationError(
                f"Dataset has {dataset.num_classes} classes but model.num_classes is {model_config.num_classes}"
            )
    return model_config


@task(name="fit_feature_classifier", description="Train the action classifier whose features feed the Fréchet distance")
def fit_feature_classifier(config: Box, dataset: MotionDataset) -> t.Callable[[np.ndarray], np.ndarray]:
    if (config.get("evaluate") or {}).get("features", "classifier") == "flatten":
        return FlattenFeatures()
    classifier = build_model("classifier", _model_config(config, dataset), seed=config.SEED)
    X, labels = dataset.subset("train")
    LearnLab.fit_classifier(classifier, X, labels, TrainConfig.from_config(config.train), seed=config.SEED)
    return ClassifierFeatures(classifier)


def _kernel(config: Box) -> KernelConfig:
    kernel = (config.get("evaluate") or {}).get("kernel") or {}
    return KernelConfig(
        scales=tuple(float(s) for s in kernel.get("scales", KernelConfig.scales)),
        relative=bool(kernel.get("relative", True)),
    )


def _real_set(config: Box, dataset: MotionDataset) -> t.Tuple[np.ndarray, np.ndarray]:
    X, labels = dataset.subset((config.get("evaluate") or {}).get("split", "eval"))
    if len(X) == 0:
        X, labels = dataset.subset("train")
    return X, labels


@task(name="train_models", description="Adversarial training with checkpoints and a run log")
def train_models(config: Box, paths: RunPaths, dataset: MotionDataset, resume: bool = False) -> Path:
    """
    Runs the training loop and returns the last checkpoint
    """
    run_logger = get_run_logger()
    model_config = _model_config(config, dataset)
    train_config = TrainConfig.from_config(config.train)
    generator = build_model("generator", model_config, seed=config.SEED)
    discriminator = build_model("discriminator", model_config, seed=config.SEED)
    state = LearnLab.build_state(generator, discriminator, train_config)

    run_log = RunLog(paths.run_log)
    latest = LearnLab.latest_checkpoint(paths.checkpoints) if resume else None
    if latest is not None:
        LearnLab.resume(state, latest)
        run_log = RunLog.load(paths.run_log)
        run_log.truncate(state.step)
    elif paths.run_log.exists():
        paths.run_log.unlink()

    snapshot = None
    if train_config.eval_every:
        extractor = fit_feature_classifier.fn(config, dataset)
        real, real_labels = _real_set(config, dataset)
        kernel = _kernel(config)

        def snapshot(step: int, generator: Generator) -> t.Dict[str, float]:
            fake = generate_sequences(generator, real_labels, seed=config.SEED + step, shared_noise=False)
            report = evaluate(real, fake, extractor, kernel, dataset=dataset.fingerprint, model_checkpoint=f"step_{step}")
            report.to_json(paths.reports / f"metrics_{step}.json")
            return {k: getattr(report, k) for k in ("fid", "mmd_a", "mmd_s", "mmd_a_raw", "mmd_s_raw")}

    X, labels = dataset.subset("train")
    LearnLab.train(
        state,
        X,
        labels,
        train_config,
        seed=config.SEED,
        run_log=run_log,
        checkpoint_dir=paths.checkpoints,
        metadata={"config_fingerprint": Pilot.fingerprint(config), "dataset_fingerprint": dataset.fingerprint},
        snapshot=snapshot,
    )
    run_logger.info(f"Training finished at step {state.step}")
    if run_log.records:
        Vizard.plot_run_log(run_log.records, paths.figures)
    return paths.checkpoints / f"step_{state.step}"


def load_run(run_dir: t.Union[str, Path]) -> t.Tuple[Box, RunPaths]:
    """
    Reads the configuration snapshot of an existing run directory
    """
    paths = RunPaths.under(Path(run_dir).absolute())
    snapshot = paths.root / SNAPSHOT_NAME
    if not snapshot.is_file():
        raise CheckpointError(f"{paths.root} holds no {SNAPSHOT_NAME}, is it a run directory?")
    config = Pilot.load_config(snapshot)
    Pilot.validate_config(config)
    return config, paths.create()


@task(name="load_generator", description="Rebuild the generator and load checkpoint values")
def load_generator(config: Box, checkpoint: t.Union[str, Path]) -> Generator:
    arrays, metadata = load_checkpoint(checkpoint)
    generator = build_model("generator", _model_config(config), seed=config.SEED)
    try:
        generator.load_arrays(arrays, "generator.")
    except ShapeError as e:
        raise CheckpointError(f"Checkpoint {checkpoint} does not fit the configured generator: {e}") from e
    generator.eval()
    logger.info(f"Loaded generator from {checkpoint} (step {metadata.get('step', '?')})")
    return generator


def _checkpoint(paths: RunPaths, checkpoint: t.Optional[str]) -> Path:
    if checkpoint is not None:
        return Path(checkpoint)
    latest = LearnLab.latest_checkpoint(paths.checkpoints)
    if latest is None:
        raise CheckpointError(f"No checkpoint found under {paths.checkpoints}")
    return latest


@flow(name="kforge_train", description="Train a conditional skeleton action generator")
def train_workflow(
    config_path: str,
    overrides: t.Sequence[str] = (),
    seed: t.Optional[int] = None,
    output_dir: t.Optional[str] = None,
    deterministic: bool = False,
    resume: bool = False,
) -> str:
    """
    setup -> dataset -> training, uses the prefect run logger

    Args:
        config_path (str): Path for config file
    """
    run_logger = get_run_logger()
    config, paths = setup_run(config_path, overrides, seed, output_dir, deterministic)
    run_logger.info(f"Run directory {paths.root} has been configured")

    dataset = build_dataset(config, paths.root / "manifest.csv")
    run_logger.info(f"Dataset {dataset.fingerprint[:12]} loaded, classes {dataset.class_histogram()}")

    checkpoint = train_models(config, paths, quote(dataset), resume)
    run_logger.info(f"Last checkpoint {checkpoint}")
    return str(paths.root)


@flow(name="kforge_generate", description="Sample sequences of one class from a trained generator")
def generate_workflow(
    run_dir: str,
    label: int,
    count: t.Optional[int] = None,
    psi: t.Optional[float] = None,
    noise_seed: t.Optional[int] = None,
    seed: t.Optional[int] = None,
    checkpoint: t.Optional[str] = None,
    svg: bool = False,
) -> t.List[str]:
    run_logger = get_run_logger()
    config, paths = load_run(run_dir)
    settings = Box(config.get("generate") or {})
    count = int(count if count is not None else settings.get("count", 8))
    psi = float(psi if psi is not None else settings.get("psi", 1.0))
    noise_seed = noise_seed if noise_seed is not None else settings.get("noise_seed")
    seed = int(seed if seed is not None else config.SEED)
    center_samples = int(settings.get("center_samples", 1000))
    source = _checkpoint(paths, checkpoint)
    generator = load_generator(config, source)

    X = generate_sequences(
        generator,
        [label] * count,
        seed=seed,
        psi=psi,
        noise_seed=noise_seed,
        centers=None,
        center_samples=center_samples,
    )
    out_dir = paths.sequences / f"class{label}_psi{psi:g}_seed{seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = {
        "checkpoint": str(source),
        "label": label,
        "count": count,
        "psi": psi,
        "noise_seed": noise_seed,
        "seed": seed,
        "center_samples": center_samples,
    }
    (out_dir / "generate.json").write_text(json.dumps(effective, indent=2, sort_keys=True))
    written = []
    for i, data in enumerate(X):
        sample = MotionSample(data=data, label=label, skeleton=generator.config.pyramid, provenance=f"{source}:{seed}:{i}")
        written.append(str(export_sequence(sample, out_dir / f"sample_{i:03d}.json")))
        if svg:
            Vizard.render_svg(sample, out_dir / f"sample_{i:03d}.svg", int(settings.get("render_stride", 8)))
    run_logger.info(f"Wrote {len(written)} sequences of class {label} to {out_dir}")
    return written


@flow(name="kforge_evaluate", description="FID, MMD_a and MMD_s of generated against real sequences")
def evaluate_workflow(
    run_dir: str,
    checkpoint: t.Optional[str] = None,
    fake_dir: t.Optional[str] = None,
    samples: t.Optional[int] = None,
    seed: t.Optional[int] = None,
) -> str:
    run_logger = get_run_logger()
    config, paths = load_run(run_dir)
    seed = int(seed if seed is not None else config.SEED)
    dataset = build_dataset(config)
    real, real_labels = _real_set(config, dataset)
    count = int(samples if samples is not None else (config.get("evaluate") or {}).get("samples", len(real)))
    source = None if fake_dir is not None else _checkpoint(paths, checkpoint)
    effective = {
        "checkpoint": None if source is None else str(source),
        "fake_dir": fake_dir,
        "samples": None if fake_dir is not None else count,
        "seed": seed,
    }
    (paths.reports / "evaluate.json").write_text(json.dumps(effective, indent=2, sort_keys=True))

    if fake_dir is not None:
        files = sorted(Path(fake_dir).glob("sample_*.json"))
        fake = np.stack([import_sequence(p).data for p in files]) if files else np.empty((0,) + real.shape[1:])
        tag = str(fake_dir)
    else:
        generator = load_generator(config, source)
        labels = np.resize(real_labels, count)
        fake = generate_sequences(generator, labels, seed=seed, shared_noise=False)
        tag = str(source)

    extractor = fit_feature_classifier(config, quote(dataset))
    report = evaluate(real, fake, extractor, _kernel(config), dataset=dataset.fingerprint, model_checkpoint=tag)
    out = report.to_json(paths.reports / f"metrics_{Path(tag).name}.json")
    Pilot.publish_report(report, key=f"metrics-{Path(tag).name.replace('_', '-').lower()}")
    run_logger.info(f"FID {report.fid:.4f}, MMD_a {report.mmd_a:.4f}, MMD_s {report.mmd_s:.4f} -> {out}")
    return str(out)


@flow(name="kforge_study", description="Truncation, stochastic variation and conditioning studies")
def study_workflow(
    run_dir: str,
    label: int = 0,
    checkpoint: t.Optional[str] = None,
    latents: int = 256,
    realizations: int = 100,
    per_class: int = 64,
) -> str:
    run_logger = get_run_logger()
    config, paths = load_run(run_dir)
    generator = load_generator(config, _checkpoint(paths, checkpoint))

    center_samples = int((config.get("generate") or {}).get("center_samples", 1000))
    trend = truncation_trend(generator, seed=config.SEED, label=label, num_latents=latents, center_samples=center_samples)
    variation = stochastic_variation(generator, label, seed=config.SEED, realizations=realizations)
    silenced = stochastic_variation(generator, label, seed=config.SEED, realizations=realizations, zero_noise=True)
    results = {
        "truncation": trend.to_dict(),
        "stochastic_variation": variation.tolist(),
        "stochastic_variation_zero_noise": silenced.tolist(),
    }
    load_config = config.data.load
    if load_config.strategy == "synthetic":
        bands = SynthMotionConfig(**{k: v for k, v in (load_config.get("args") or {}).items()}).bands
        results["conditioning_accuracy"] = conditioning_accuracy(generator, bands, seed=config.SEED, per_class=per_class)

    out = paths.reports / "study.json"
    out.write_text(json.dumps(results, indent=2, sort_keys=True))
    Vizard.plot_truncation_trend(trend.psis, trend.variances, paths.figures)
    Vizard.plot_stochastic_variation(variation, generator.pyramid.finest.spec.joint_names, paths.figures)
    run_logger.info(f"Study written to {out}")
    return str(out)


def render(input_path: str, output: t.Optional[str], stride: int) -> Path:
    """
    Draws a sequence file as an SVG strip and records the arguments in `<name>.render.json` beside it
    """
    sample = import_sequence(input_path)
    svg = Vizard.render_svg(sample, output or Path(input_path).with_suffix(".svg"), stride)
    effective = {"input": str(Path(input_path).absolute()), "output": str(Path(svg).absolute()), "stride": stride}
    Path(svg).with_suffix(".render.json").write_text(json.dumps(effective, indent=2, sort_keys=True))
    return svg


def inspect_pyramid(name: str, config_path: t.Optional[str] = None) -> t.Dict[str, t.Any]:
    """
    Level sizes, partition edge counts and, given a config, the batch-norm audit
    """
    pyramid = load_pyramid(name)
    report: t.Dict[str, t.Any] = {
        "pyramid": pyramid.name,
        "level_sizes": list(pyramid.level_sizes),
        "partitions": [
            {
                "level": level.index,
                "joints": level.size,
                "edges": [int(np.count_nonzero(part)) for part in level.adjacency.raw],
            }
            for level in pyramid.levels
        ],
    }
    if config_path is not None:
        config = Pilot.load_config(config_path)
        model_config = ModelConfig.from_config(config.model)
        generator = build_model("generator", model_config, seed=int(config.get("SEED", 0)), audit=False)
        discriminator = build_model("discriminator", model_config, seed=int(config.get("SEED", 0)))
        report["batchnorm_policy"] = model_config.batchnorm
        report["batchnorm_violations"] = audit_batchnorm(generator, discriminator)
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kforge",
        description="Skeleton action generation with graph-convolutional WGAN-GP",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", help="Train a generator")
    train.add_argument("--config", default="./kforge/conf/synth4.yaml")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--steps", type=int, default=None)
    train.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    train.add_argument("--output", default=None)
    train.add_argument("--deterministic", action="store_true")
    train.add_argument("--resume", action="store_true")

    generate = subparsers.add_parser("generate", help="Sample sequences of one class")
    generate.add_argument("--run", required=True)
    generate.add_argument("--class", dest="label", type=int, required=True)
    generate.add_argument("--count", type=int, default=None)
    generate.add_argument("--psi", type=float, default=None)
    generate.add_argument("--noise-seed", type=int, default=None)
    generate.add_argument("--seed", type=int, default=None)
    generate.add_argument("--checkpoint", default=None)
    generate.add_argument("--svg", action="store_true")

    evaluate_cmd = subparsers.add_parser("evaluate", help="Compute FID, MMD_a and MMD_s")
    evaluate_cmd.add_argument("--run", required=True)
    evaluate_cmd.add_argument("--checkpoint", default=None)
    evaluate_cmd.add_argument("--fake-dir", default=None)
    evaluate_cmd.add_argument("--samples", type=int, default=None)
    evaluate_cmd.add_argument("--seed", type=int, default=None)

    render_cmd = subparsers.add_parser("render", help="Draw a sequence file as an SVG strip")
    render_cmd.add_argument("--input", required=True)
    render_cmd.add_argument("--output", default=None)
    render_cmd.add_argument("--stride", type=int, default=8)

    inspect = subparsers.add_parser("inspect-pyramid", help="Print pyramid levels and audit batch-norm placement")
    inspect.add_argument("--pyramid", default="ntu25")
    inspect.add_argument("--config", default=None)

    study = subparsers.add_parser("study", help="Truncation, variation and conditioning studies")
    study.add_argument("--run", required=True)
    study.add_argument("--class", dest="label", type=int, default=0)
    study.add_argument("--checkpoint", default=None)
    study.add_argument("--latents", type=int, default=256)
    study.add_argument("--realizations", type=int, default=100)
    study.add_argument("--per-class", type=int, default=64)
    return parser


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            overrides = list(args.overrides) + ([f"train.steps={args.steps}"] if args.steps is not None else [])
            train_workflow(args.config, overrides, args.seed, args.output, args.deterministic, args.resume)
        elif args.command == "generate":
            generate_workflow(args.run, args.label, args.count, args.psi, args.noise_seed, args.seed, args.checkpoint, args.svg)
        elif args.command == "evaluate":
            evaluate_workflow(args.run, args.checkpoint, args.fake_dir, args.samples, args.seed)
        elif args.command == "render":
            print(render(args.input, args.output, args.stride))
        elif args.command == "inspect-pyramid":
            print(json.dumps(inspect_pyramid(args.pyramid, args.config), indent=2))
        elif args.command == "study":
            study_workflow(args.run, args.label, args.checkpoint, args.latents, args.realizations, args.per_class)
    except KforgeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
