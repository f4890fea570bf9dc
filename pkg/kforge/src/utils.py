"""
This script includes all the helper utility functions and classes
"""

import hashlib
import json
import os
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from box import Box
from prefect import artifacts
from prefect.logging import get_logger
from threadpoolctl import threadpool_limits
from kforge.src.analysis import validate_generate_config
from kforge.src.data import thread_limit, validate_data_config
from kforge.src.exceptions import ConfigValidationError
from kforge.src.metrics import MetricsReport, validate_evaluate_config
from kforge.src.model import validate_model_config
from kforge.src.training import validate_train_config

logger = get_logger("kforge.utils")

CONFIG_SUFFIXES = (".yaml", ".yml", ".json")
SNAPSHOT_NAME = "config.json"


@dataclass(frozen=True)
class RunPaths:
    root: Path
    checkpoints: Path
    reports: Path
    figures: Path
    sequences: Path

    @classmethod
    def under(cls, root: Path) -> "RunPaths":
        return cls(
            root=root,
            checkpoints=root / "checkpoints",
            reports=root / "reports",
            figures=root / "figures",
            sequences=root / "sequences",
        )

    def create(self) -> "RunPaths":
        for directory in (self.root, self.checkpoints, self.reports, self.figures, self.sequences):
            directory.mkdir(parents=True, exist_ok=True)
        return self

    @property
    def run_log(self) -> Path:
        return self.root / "run_log.jsonl"


class Pilot:
    _thread_limiter = None

    @staticmethod
    def validate_config(config: Box) -> None:
        """
        Validates configuration mapping

        Args:
            config (Box): Configuration mapping

        Raises:
            ConfigValidationError: If seed specified is not an integer, or any section is invalid
        """
        if not isinstance(config.get("SEED"), int) or isinstance(config.get("SEED"), bool):
            raise ConfigValidationError("SEED should be an integer.")
        validate_data_config(config=config)
        validate_model_config(config=config)
        validate_train_config(config=config)
        validate_evaluate_config(config=config)
        validate_generate_config(config=config)

    @staticmethod
    def load_config(filepath: t.Union[str, Path]) -> Box:
        """
        Reads a YAML or JSON configuration file

        Raises:
            ConfigValidationError: Missing file or unsupported suffix
        """
        filepath = Path(filepath)
        if not (filepath.is_file() and filepath.suffix in CONFIG_SUFFIXES):
            raise ConfigValidationError(f"Please check if {filepath} exists and is one of {CONFIG_SUFFIXES}")
        with open(filepath, "r") as f_in:
            return Box(yaml.safe_load(stream=f_in) or {})

    @staticmethod
    def apply_overrides(config: Box, overrides: t.Sequence[str]) -> Box:
        """
        Applies dotted `key.path=value` overrides, values parsed as YAML scalars

        Raises:
            ConfigValidationError: Malformed override or a key path absent from the configuration
        """
        for override in overrides or ():
            if "=" not in override:
                raise ConfigValidationError(f"Override '{override}' must look like key.path=value")
            key, raw = override.split("=", 1)
            parts = key.strip().split(".")
            node = config
            for depth, part in enumerate(parts):
                if not isinstance(node, dict) or part not in node:
                    raise ConfigValidationError(f"Unknown configuration key '{'.'.join(parts[: depth + 1])}'")
                if depth < len(parts) - 1:
                    node = node[part]
            node[parts[-1]] = yaml.safe_load(raw)
        return config

    @staticmethod
    def fingerprint(config: t.Mapping) -> str:
        payload = config.to_dict() if isinstance(config, Box) else dict(config)
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]

    @staticmethod
    def configure_threads(deterministic: bool = False) -> int:
        """
        Caps BLAS threads and worker processes. `deterministic` forces a single thread.

        Returns:
            int: The thread cap in effect
        """
        if deterministic:
            os.environ["KFORGE_THREADS"] = "1"
        limit = thread_limit()
        Pilot._thread_limiter = threadpool_limits(limits=limit)
        return limit

    @staticmethod
    def setup(
        filepath: t.Union[str, Path],
        overrides: t.Sequence[str] = (),
        seed: t.Optional[int] = None,
        output_dir: t.Optional[t.Union[str, Path]] = None,
        name: t.Optional[str] = None,
        deterministic: bool = False,
    ) -> t.Tuple[Box, RunPaths]:
        """
        Loads and validates the configuration, then creates the run directory
        and writes the effective configuration snapshot into it. Nothing is
        created when validation fails.

        Args:
            filepath (t.Union[str, Path]): Path to the `.yaml`/`.json` file
            overrides (t.Sequence[str]): Dotted overrides
            seed (t.Optional[int]): Replaces `SEED`
            output_dir (t.Optional[t.Union[str, Path]]): Run directory, defaults to `<path.runs>/<name>`
            name (t.Optional[str]): Run name, defaults to the config stem and seed
            deterministic (bool): Single-threaded numerics

        Returns:
            t.Tuple[Box, RunPaths]: Configuration mapping and paths of the run directory
        """
        config = Pilot.apply_overrides(Pilot.load_config(filepath), overrides)
        if seed is not None:
            config.SEED = int(seed)
        Pilot.validate_config(config=config)
        Pilot.configure_threads(deterministic)

        if output_dir is None:
            runs = Path((config.get("path") or {}).get("runs", "runs"))
            output_dir = runs / (name or f"{Path(filepath).stem}_seed{config.SEED}")
        paths = RunPaths.under(Path(output_dir).absolute()).create()
        (paths.root / SNAPSHOT_NAME).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        np.random.seed(config.SEED)
        logger.info(f"Run directory {paths.root} (config {Pilot.fingerprint(config)})")
        return config, paths

    @staticmethod
    def publish_report(report: MetricsReport, key: str) -> None:
        """
        Mirrors a metrics report as a prefect table artifact
        """
        row = {k: v for k, v in report.__dict__.items() if not isinstance(v, list)}
        artifacts.create_table_artifact(
            key=key,
            table=[row],
            description="## Distribution distances of generated sequences",
        )
        return None
