"""
Whole-model gradient check against central finite differences.

Coordinates are sampled per parameter tensor, so every module is exercised
no matter how large the embedding is. A coordinate whose +h or -h
perturbation changes any top-k selection sits on a routing boundary, where
the loss is not differentiable; it is skipped and counted.
"""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config.errors import UsageError
from .config.logger import logger
from .config.schemas import ModelConfig
from .config.settings import (
    GRADCHECK_BATCH_SIZE,
    GRADCHECK_INIT_STD,
    GRADCHECK_SEQ_LEN,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
)
from .model import CoEModel, model_forward
from .seeds import stream
from .tensors import Tape, Tensor, apply_op, backward, cross_entropy, no_grad, relative_error


@dataclass
class GradcheckReport:
    max_error: float = 0.0
    per_module: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_error < self.tolerance

    def observe(self, module: str, error: float) -> None:
        self.checked += 1
        self.max_error = max(self.max_error, error)
        self.per_module[module] = max(self.per_module.get(module, 0.0), error)

    def as_dict(self) -> dict:
        return {
            "max_relative_error": self.max_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "checked": self.checked,
            "skipped_routing_ties": self.skipped,
            "per_module": dict(sorted(self.per_module.items())),
        }


def module_of(name: str) -> str:
    """Maps a registered parameter name to the module family it belongs to."""
    if name == "embed":
        return "embedding"
    if name == "lm_head":
        return "lm_head"
    if name.endswith("norm"):
        return "norms"
    part = name.split(".")[2]
    return {
        "attn": "attention",
        "router": "routers",
        "experts": "routed_experts",
        "shared": "shared_experts",
    }[part]


def _doubled_gradient(x: Tensor) -> Tensor:
    # identity forward, wrong backward
    return apply_op(x.data.copy(), (x,), lambda g: (2.0 * g,), "doubled_gradient")


def _selections(traces) -> list[np.ndarray]:
    return [trace.indices for trace in traces]


def _check_seed(
    model_config: ModelConfig,
    samples: int,
    seed: int,
    h: float,
    corrupt_backward: bool,
    report: GradcheckReport,
) -> None:
    model = CoEModel.init(model_config, seed=seed, precision="f64")
    rng = stream(seed, "gradcheck")
    length = min(GRADCHECK_SEQ_LEN, model_config.max_seq_len)
    shape = (GRADCHECK_BATCH_SIZE, length)
    ids = rng.integers(0, model_config.vocab_size, size=shape)
    targets = rng.integers(0, model_config.vocab_size, size=shape).reshape(-1)

    def loss_and_selections() -> tuple[float, list[np.ndarray]]:
        with no_grad():
            logits, traces = model_forward(model, ids, capture_trace=True)
            return cross_entropy(logits, targets).item(), _selections(traces)

    params = model.parameters()
    with Tape() as tape:
        logits, traces = model_forward(model, ids, capture_trace=True)
        loss = cross_entropy(logits, targets)
        if corrupt_backward:
            loss = _doubled_gradient(loss)
    backward(tape, loss)
    baseline = _selections(traces)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}

    for _ in range(samples):
        param = params[int(rng.integers(len(params)))]
        if not param.data.flags.c_contiguous:
            param.tensor.data = np.ascontiguousarray(param.data)
        flat = param.data.reshape(-1)
        index = int(rng.integers(flat.size))
        original = flat[index]

        flat[index] = original + h
        upper, upper_sel = loss_and_selections()
        flat[index] = original - h
        lower, lower_sel = loss_and_selections()
        flat[index] = original

        unchanged = all(
            np.array_equal(a, b) and np.array_equal(a, c)
            for a, b, c in zip(baseline, upper_sel, lower_sel)
        )
        if not unchanged:
            report.skipped += 1
            logger.warning(f"gradcheck: skipped {param.name}[{index}], perturbation crosses a routing boundary")
            continue
        numeric = (upper - lower) / (2.0 * h)
        error = relative_error(float(analytic[param.name].reshape(-1)[index]), numeric)
        report.observe(module_of(param.name), error)


def check_model_gradients(
    model_config: ModelConfig,
    samples: int,
    seeds: Sequence[int] = (0, 1, 2),
    h: float = GRADCHECK_STEP,
    corrupt_backward: bool = False,
) -> GradcheckReport:
    """
    Compares taped gradients of the full language-model loss with central differences.

    The model is built in 64-bit precision at a well-conditioned point
    (larger initial scale than training uses) so gradients sit well above
    finite-difference round-off.

    Args:
        model_config (ModelConfig): Architecture to check.
        samples (int): Coordinates sampled per seed.
        seeds (Sequence[int]): One freshly initialised model per seed.
        h (float): Finite-difference step.
        corrupt_backward (bool): Doubles every analytic gradient; the check must then fail.

    Returns:
        GradcheckReport: Worst relative error overall and per module.

    Raises:
        UsageError: If ``samples`` is not positive or no seed is given.
    """
    if samples <= 0:
        raise UsageError(f"gradcheck: samples must be positive, got {samples}")
    if not seeds:
        raise UsageError("gradcheck: at least one seed is required")
    config = model_config.model_copy(update={"init_std": GRADCHECK_INIT_STD})
    report = GradcheckReport()
    for seed in seeds:
        _check_seed(config, samples, seed, h, corrupt_backward, report)
        logger.info(f"gradcheck seed {seed}: max relative error so far {report.max_error:.3e}")
    return report
