"""
Iterative expert layer: C communication steps inside one sublayer.

    x(0) = x
    x(t) = sum_i Eh_i(x(t-1)) + sum_i g_{t,i} E_i(x(t-1)) + residual(t)
    y    = x(C)                       (+ x once, for the outer residual)

``residual(t)`` is x(t-1) for ``inner``, x(0) for ``init`` and zero for
``outer`` and ``none``. Each step selects K/C experts, so a token still costs
K expert passes per layer.
"""

from typing import Optional

import numpy as np

from .config.errors import ConfigurationError
from .config.schemas import CoEConfig
from .experts import (
    ExpertLayer,
    GateVector,
    InvocationCounter,
    RoutingTrace,
    affinities,
    apply_experts,
    apply_shared,
    load_balance_penalty,
    select_topk,
    trace_step,
)
from .tensors import Tensor, add


def check_layer(config: CoEConfig, layer: ExpertLayer) -> None:
    """Rejects a config the layer's parameters cannot run, before any compute."""
    problems = []
    if len(layer.experts) != config.num_experts:
        problems.append(f"{len(layer.experts)} routed experts, config wants {config.num_experts}")
    if len(layer.shared) != config.num_shared_experts:
        problems.append(f"{len(layer.shared)} shared experts, config wants {config.num_shared_experts}")
    if len(layer.routers) < config.num_routers:
        problems.append(f"{len(layer.routers)} routers, config wants {config.num_routers}")
    if layer.routers and layer.routers[0].hidden_size != config.hidden_size:
        problems.append(
            f"router width {layer.routers[0].hidden_size}, config wants {config.hidden_size}"
        )
    if problems:
        raise ConfigurationError(f"layer {layer.index}: " + "; ".join(problems))


def coe_forward(
    config: CoEConfig,
    params: ExpertLayer,
    x: Tensor,
    capture_trace: bool = True,
    aux_losses: Optional[list[Tensor]] = None,
) -> tuple[Tensor, Optional[RoutingTrace]]:
    """
    Runs the C-step expert chain on ``x``.

    Args:
        config (CoEConfig): Iterations, selections, residual and gating modes.
        params (ExpertLayer): Routers and experts of the layer.
        x (Tensor): One token ``[d]`` or a batch ``[tokens, d]``.
        capture_trace (bool): Return the routing trace (counters run regardless).
        aux_losses (list[Tensor], optional): Receives load-balance penalties when enabled.

    Returns:
        tuple[Tensor, Optional[RoutingTrace]]: Output shaped like ``x`` and the trace.

    Raises:
        ConfigurationError: If ``config`` does not fit ``params``.
    """
    check_layer(config, params)
    k = config.k_per_iteration
    num_tokens = 1 if x.ndim == 1 else x.shape[0]

    origin = x
    state = x
    gates: Optional[GateVector] = None
    steps = []
    for t in range(config.num_iterations):
        if gates is None or config.gating_mode == "per_iteration":
            router = params.routers[t if config.gating_mode == "per_iteration" else 0]
            scores = affinities(router, state)
            gates = select_topk(scores, k)
            if aux_losses is not None and config.load_balance_coef > 0:
                aux_losses.append(load_balance_penalty(scores, gates, config.load_balance_coef))

        counter = InvocationCounter(num_tokens)
        update = add(
            apply_shared(params.shared, state),
            apply_experts(params.experts, gates, state, counter),
        )
        if config.residual_mode == "inner":
            update = add(update, state)
        elif config.residual_mode == "init":
            update = add(update, origin)
        state = update
        steps.append(trace_step(gates, counter))

    if config.residual_mode == "outer":
        state = add(state, origin)

    if not capture_trace:
        return state, None
    trace = RoutingTrace(
        layer=params.index,
        indices=np.stack([s[0] for s in steps], axis=1),
        gates=np.stack([s[1] for s in steps], axis=1),
        invocations=np.stack([s[2] for s in steps], axis=1),
    )
    return state, trace


def _require(config: CoEConfig, attribute: str, expected: str) -> None:
    actual = getattr(config, attribute)
    if actual != expected:
        raise ConfigurationError(f"{attribute}={actual!r}, this variant needs {expected!r}")


def coe_forward_shared_gating(
    config: CoEConfig, params: ExpertLayer, x: Tensor
) -> tuple[Tensor, Optional[RoutingTrace]]:
    """Ablation: gates are computed once from x(0) and reused at every step."""
    _require(config, "gating_mode", "shared")
    return coe_forward(config, params, x)


def coe_forward_outer_residual(
    config: CoEConfig, params: ExpertLayer, x: Tensor
) -> tuple[Tensor, Optional[RoutingTrace]]:
    """Ablation: no per-step residual; the layer input is added once after the last step."""
    _require(config, "residual_mode", "outer")
    return coe_forward(config, params, x)


def coe_forward_init_residual(
    config: CoEConfig, params: ExpertLayer, x: Tensor
) -> tuple[Tensor, Optional[RoutingTrace]]:
    """Variant: every step adds x(0) instead of x(t-1)."""
    _require(config, "residual_mode", "init")
    return coe_forward(config, params, x)
