"""AdamW with decoupled weight decay, warmup schedule and global-norm clipping."""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config.errors import NumericError, UsageError
from .config.logger import logger
from .config.schemas import TrainConfig
from .tensors import Parameter


@dataclass
class OptimizerState:
    """First and second moments per parameter name, plus the update counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Parameter]) -> "OptimizerState":
        return cls(
            m={p.name: np.zeros_like(p.data) for p in params},
            v={p.name: np.zeros_like(p.data) for p in params},
        )


def warmup_steps(config: TrainConfig) -> int:
    steps = int(round(config.warmup_fraction * config.total_steps))
    return min(max(steps, 1), config.total_steps - 1)


def lr_at(config: TrainConfig, step: int) -> float:
    """
    Learning rate at ``step``: linear 0 -> peak over warmup, then linear
    peak -> 0 at ``total_steps`` (or flat, with ``lr_schedule="constant"``).
    """
    if not 0 <= step <= config.total_steps:
        raise UsageError(f"lr_at: step {step} outside [0, {config.total_steps}]")
    warmup = warmup_steps(config)
    if step <= warmup:
        return config.learning_rate * step / warmup
    if config.lr_schedule == "constant":
        return config.learning_rate
    remaining = config.total_steps - warmup
    return config.learning_rate * (config.total_steps - step) / remaining


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """
    Scales every gradient in place when their joint L2 norm exceeds ``max_norm``.

    Returns:
        float: The applied scale, 1.0 when no clipping happened.
    """
    if max_norm <= 0:
        raise UsageError(f"clip_global_norm: max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads:
        g *= factor
    return factor


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
    rate: float,
    config: TrainConfig,
) -> None:
    """
    One AdamW update, in place.

    p <- p - rate * m_hat / (sqrt(v_hat) + eps) - rate * wd * p, with weight
    decay only on parameters flagged for it.

    Raises:
        NumericError: If any gradient is non-finite; no parameter is touched.
    """
    if rate < 0:
        raise UsageError(f"adamw_step: negative learning rate {rate}")
    for param, grad in zip(params, grads):
        if grad is not None and not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient in parameter '{param.name}'")
            raise NumericError(f"non-finite gradient in parameter '{param.name}'")

    beta1, beta2 = config.betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for param, grad in zip(params, grads):
        if not param.trainable:
            continue
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.m.setdefault(param.name, np.zeros_like(param.data))
        v = state.v.setdefault(param.name, np.zeros_like(param.data))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
        if param.weight_decay and config.weight_decay:
            update = update + config.weight_decay * param.data
        param.tensor.data = param.data - rate * update
