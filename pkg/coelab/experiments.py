"""
Experiment grids: named sets of configuration overrides trained over several seeds.

Each arm is a dict of dotted-path overrides applied to a base run
configuration. The grid reports mean, min and max final validation loss per
arm; no ordering between arms is implied.
"""

from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Any, Optional, Sequence

from .config.errors import ConfigurationError, NumericError
from .config.logger import logger
from .config.schemas import RunConfig
from .config.settings import GRID_REPORT_FILE, RESOLVED_CONFIG_FILE
from .data import DataStream
from .files import ensure_directory
from .json_utils import write_json_file
from .model import CoEModel
from .training import train

Arm = dict[str, Any]


def _selection(total_k: int, iterations: int) -> Arm:
    return {"model.coe.total_k": total_k, "model.coe.num_iterations": iterations}


PRESETS: dict[str, dict[str, Arm]] = {
    "ablation": {
        f"{residual}-{gating}": {
            "model.coe.residual_mode": residual,
            "model.coe.gating_mode": gating,
        }
        for residual in ("inner", "outer", "init")
        for gating in ("per_iteration", "shared")
    },
    "compare": {
        "coe-k4c2": _selection(4, 2),
        "moe-k8c1": _selection(8, 1),
    },
    "shared_experts": {
        f"m{shared}-k{k}c{c}": {**_selection(k, c), "model.coe.num_shared_experts": shared}
        for shared in (0, 1)
        for k, c in ((4, 2), (8, 1))
    },
    "iterations": {f"k8c{c}": _selection(8, c) for c in (1, 2, 4)},
    "sparsity": {
        f"n{n}-k4c{c}": {**_selection(4, c), "model.coe.num_experts": n}
        for n in (8, 4)
        for c in (1, 2)
    },
    # deeper single-step stacks against a shallow chained one
    "depth": {
        **{f"moe-l{depth}": {**_selection(8, 1), "model.num_layers": depth} for depth in (4, 8, 12)},
        "coe-l4c2": {**_selection(8, 2), "model.num_layers": 4},
    },
    # more experts per token against chaining at fixed K
    "width": {
        **{f"moe-k{k}": {**_selection(k, 1), "model.coe.num_experts": 24} for k in (8, 16, 24)},
        "coe-k8c2": {**_selection(8, 2), "model.coe.num_experts": 24},
    },
    "experts": {
        "coe-n48-k4c2": {**_selection(4, 2), "model.coe.num_experts": 48},
        "moe-n64-k8c1": {**_selection(8, 1), "model.coe.num_experts": 64},
    },
}


@dataclass
class ArmResult:
    name: str
    overrides: Arm
    losses: dict[int, Optional[float]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        finished = [loss for loss in self.losses.values() if loss is not None]
        return {
            "arm": self.name,
            "overrides": self.overrides,
            "final_val_loss": {str(seed): loss for seed, loss in self.losses.items()},
            "aborted_seeds": [seed for seed, loss in self.losses.items() if loss is None],
            "mean": fmean(finished) if finished else None,
            "min": min(finished) if finished else None,
            "max": max(finished) if finished else None,
        }


def run_arm(config: RunConfig, out_dir: Path) -> Optional[float]:
    """Trains one configuration; returns its final validation loss, or None on a numeric abort."""
    ensure_directory(out_dir)
    write_json_file(config.model_dump(mode="json"), out_dir / RESOLVED_CONFIG_FILE)
    model = CoEModel.init(config.model, seed=config.train.seed, precision=config.train.precision)
    data = DataStream.from_config(config.data, config.train, config.model.vocab_size)
    try:
        return train(model, data, config.train, out_dir, analysis=config.analysis).final_val_loss
    except NumericError as e:
        logger.error(f"Run in '{out_dir}' aborted: {e}")
        return None


def run_grid(
    base: RunConfig,
    preset: str,
    seeds: Sequence[int],
    steps: int,
    out_dir: Path,
    corpus: Optional[Path] = None,
) -> dict:
    """
    Trains every arm of a preset for every seed and writes ``grid_report.json``.

    Args:
        base (RunConfig): Configuration the arm overrides apply to.
        preset (str): One of ``PRESETS``.
        seeds (Sequence[int]): Seeds per arm.
        steps (int): Training steps per run.
        out_dir (Path): Runs go to ``<out_dir>/<arm>/seed_<seed>``.
        corpus (Path, optional): Corpus file for the bytes task, recorded as ``data.path``.

    Returns:
        dict: The report that was written.

    Raises:
        ConfigurationError: For an unknown preset or an arm the base cannot host.
    """
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    if not seeds:
        raise ConfigurationError("grid needs at least one seed")
    if corpus is not None:
        base = base.with_overrides({"data.path": str(corpus.resolve())})
    ensure_directory(out_dir)

    results = []
    for name, overrides in PRESETS[preset].items():
        arm = ArmResult(name, overrides)
        for seed in seeds:
            config = base.with_overrides({**overrides, "train.total_steps": steps, "train.seed": seed})
            logger.info(f"grid {preset}: arm {name}, seed {seed}")
            arm.losses[seed] = run_arm(config, out_dir / name / f"seed_{seed}")
        results.append(arm.as_dict())

    report = {"preset": preset, "steps": steps, "seeds": list(seeds), "arms": results}
    write_json_file(report, out_dir / GRID_REPORT_FILE)
    return report
