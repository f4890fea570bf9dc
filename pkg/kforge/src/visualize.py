"""
Contains functions to make plots and visualizations
"""
import math
import typing as t
import warnings
from pathlib import Path

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import polars as pl
import seaborn as sns
from kforge.src.data import MotionSample
from kforge.src.exceptions import ConfigValidationError, ShapeError
from kforge.src.graph import load_pyramid

warnings.simplefilter("ignore")
plt.switch_backend("agg")
plt.ioff()

SVG_SALT = "kforge"
LOSS_COLUMNS = ("critic_loss", "wasserstein", "penalty", "generator_loss")


class Vizard:
    @staticmethod
    def render_svg(sample: MotionSample, path: t.Union[str, Path], stride: int = 8) -> Path:
        """
        Draws every `stride`-th frame as a joint-and-bone wireframe, panels
        side by side. 3D samples are projected orthographically by dropping
        the depth axis. Equal inputs give byte-identical files.

        Args:
            sample (MotionSample): Sequence to draw
            path (t.Union[str, Path]): Output `.svg` file
            stride (int): Frame step between panels

        Raises:
            GraphDefinitionError: Unknown skeleton name
            ConfigValidationError: Non-positive stride

        Returns:
            Path: The written file
        """
        if stride < 1:
            raise ConfigValidationError(f"Render stride must be positive, got {stride}")
        spec = load_pyramid(sample.skeleton).finest.spec
        if sample.joints != spec.num_joints:
            raise ShapeError(f"Sample has {sample.joints} joints but skeleton '{sample.skeleton}' has {spec.num_joints}")
        frames = list(range(0, sample.frames, stride))
        xy = sample.data[:2]
        pad = 0.05 * max(float(np.ptp(xy)), 1e-6)
        lo, hi = xy.min(axis=(1, 2)) - pad, xy.max(axis=(1, 2)) + pad

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
            fig, axes = plt.subplots(1, len(frames), figsize=(1.6 * len(frames), 2.4), squeeze=False)
            for ax, frame in zip(axes[0], frames):
                x, y = xy[0, frame], xy[1, frame]
                for i, j in spec.edges:
                    ax.plot([x[i], x[j]], [y[i], y[j]], color="#2D2926", linewidth=1.2)
                ax.scatter(x, y, s=6, color="#E94B3C", zorder=3)
                ax.set_xlim(lo[0], hi[0])
                ax.set_ylim(lo[1], hi[1])
                ax.set_aspect("equal")
                ax.set_title(f"t={frame}", fontsize=8)
                ax.axis("off")
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
        return path

    @staticmethod
    def panel_count(frames: int, stride: int) -> int:
        return math.ceil(frames / stride)

    @staticmethod
    def plot_run_log(records: t.List[t.Dict[str, t.Any]], viz_dir: Path) -> Path:
        """
        Plots critic/generator losses and the penalty against generator steps

        Args:
            records (t.List[t.Dict[str, t.Any]]): Run log records
            viz_dir (Path): Directory to store the plot to
        """
        data = pl.DataFrame([{k: r[k] for k in ("step",) + LOSS_COLUMNS} for r in records])
        long = data.unpivot(index="step", on=list(LOSS_COLUMNS), variable_name="series", value_name="value")
        fig = plt.figure(figsize=(10, 6))
        ax = fig.add_subplot(111)
        sns.lineplot(data=long.to_pandas(), x="step", y="value", hue="series", ax=ax)
        ax.set_title("Training losses", fontsize=17, loc="center")
        ax.set_xlabel("generator step", fontsize=14)
        ax.set_ylabel("loss", fontsize=13)
        out = Path(viz_dir) / "losses.png"
        fig.savefig(out, format="png")
        plt.close(fig)
        return out

    @staticmethod
    def plot_truncation_trend(psis: t.Sequence[float], variances: t.Sequence[float], viz_dir: Path) -> Path:
        fig = plt.figure(figsize=(7, 5))
        ax = fig.add_subplot(111)
        ax.plot(psis, variances, marker="o", color="#778da9")
        ax.invert_xaxis()
        ax.set_xlabel("ψ", fontsize=14)
        ax.set_ylabel("mean per-joint variance", fontsize=13)
        ax.set_title("Truncation trend")
        out = Path(viz_dir) / "truncation_trend.png"
        fig.savefig(out, format="png")
        plt.close(fig)
        return out

    @staticmethod
    def plot_stochastic_variation(std: np.ndarray, joint_names: t.Sequence[str], viz_dir: Path) -> Path:
        """
        Bar chart of the per-joint standard deviation over noise realisations
        """
        fig = plt.figure(figsize=(12, 5))
        ax = fig.add_subplot(111)
        sns.barplot(x=list(joint_names), y=np.asarray(std), color="#FDB0C0", edgecolor="black", ax=ax)
        ax.tick_params(axis="x", rotation=90)
        ax.set_ylabel("std over noise realisations")
        ax.set_title("Stochastic variation")
        fig.tight_layout()
        out = Path(viz_dir) / "stochastic_variation.png"
        fig.savefig(out, format="png")
        plt.close(fig)
        return out
