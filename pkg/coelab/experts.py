"""
Expert feed-forward networks, routers and top-k gating.

Gates follow the literal mixture formula: softmax over all N experts, then the
top-k scores are kept as they are (no renormalisation) and the rest are zero.
Only selected experts are evaluated.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config.errors import DimensionError, RoutingInvariantError, UsageError
from .config.schemas import CoEConfig
from .tensors import (
    Parameter,
    Tensor,
    add,
    matmul,
    mul,
    normal_parameter,
    reshape,
    scale,
    scale_rows,
    scatter_rows,
    silu,
    softmax_rows,
    take_rows,
    transpose,
)


@dataclass(eq=False)
class ExpertFFN:
    """Gated-linear-unit FFN: down(silu(x @ gate) * (x @ up))."""

    gate_proj: Parameter
    up_proj: Parameter
    down_proj: Parameter

    @classmethod
    def init(
        cls,
        prefix: str,
        hidden: int,
        intermediate: int,
        rng: np.random.Generator,
        std: float,
        dtype: np.dtype,
    ) -> "ExpertFFN":
        return cls(
            gate_proj=normal_parameter(f"{prefix}.gate_proj", (hidden, intermediate), rng, std, dtype),
            up_proj=normal_parameter(f"{prefix}.up_proj", (hidden, intermediate), rng, std, dtype),
            down_proj=normal_parameter(f"{prefix}.down_proj", (intermediate, hidden), rng, std, dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        gated = silu(matmul(x, self.gate_proj.tensor))
        return matmul(mul(gated, matmul(x, self.up_proj.tensor)), self.down_proj.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.gate_proj, self.up_proj, self.down_proj]


class SharedExpert(ExpertFFN):
    """An expert applied to every token, outside the gate."""


@dataclass(eq=False)
class Router:
    embed: Parameter
    iteration: int

    @property
    def num_experts(self) -> int:
        return self.embed.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.embed.shape[1]


@dataclass(eq=False)
class GateVector:
    """
    Sparse mixing weights for one token (``weights[N]``) or a batch (``weights[tokens, N]``).

    ``indices`` holds the selected expert ids of each row in ascending order.
    """

    weights: Tensor
    indices: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    @property
    def num_experts(self) -> int:
        return self.weights.shape[-1]

    def values(self) -> np.ndarray:
        """Gate values at the selected indices, aligned with ``indices``."""
        return np.take_along_axis(self.weights.data, self.indices, axis=-1)


class InvocationCounter:
    """Per-call count of expert forward passes each token triggered."""

    def __init__(self, num_tokens: int):
        self.counts = np.zeros(num_tokens, dtype=np.int64)

    def add(self, rows: np.ndarray) -> None:
        np.add.at(self.counts, rows, 1)


@dataclass
class RoutingTrace:
    """Selected experts, gate values and invocation counts per token and iteration of one layer."""

    layer: int
    indices: np.ndarray  # (tokens, C, k)
    gates: np.ndarray  # (tokens, C, k)
    invocations: np.ndarray  # (tokens, C)

    @property
    def num_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def num_iterations(self) -> int:
        return self.indices.shape[1]

    @property
    def k(self) -> int:
        return self.indices.shape[2]

    def merge(self, other: "RoutingTrace") -> "RoutingTrace":
        if other.layer != self.layer or other.indices.shape[1:] != self.indices.shape[1:]:
            raise DimensionError(
                f"cannot merge trace of layer {other.layer} {other.indices.shape} "
                f"into layer {self.layer} {self.indices.shape}"
            )
        return RoutingTrace(
            layer=self.layer,
            indices=np.concatenate([self.indices, other.indices]),
            gates=np.concatenate([self.gates, other.gates]),
            invocations=np.concatenate([self.invocations, other.invocations]),
        )

    def check_parity(self, k_per_iteration: int) -> None:
        """Raises unless every token used exactly k experts at every iteration."""
        if self.k != k_per_iteration or np.any(self.invocations != k_per_iteration):
            raise RoutingInvariantError(
                f"layer {self.layer}: expected {k_per_iteration} expert invocations per "
                f"token per iteration, saw {np.unique(self.invocations).tolist()}"
            )
        if np.any(self.gates <= 0.0):
            raise RoutingInvariantError(f"layer {self.layer}: non-positive gate value in trace")


@dataclass(eq=False)
class ExpertLayer:
    """Parameters of one expert sublayer: routers, routed experts and shared experts."""

    config: CoEConfig
    index: int
    routers: list[Router]
    experts: list[ExpertFFN]
    shared: list[SharedExpert] = field(default_factory=list)

    @classmethod
    def init(
        cls,
        config: CoEConfig,
        rng: np.random.Generator,
        dtype: np.dtype,
        std: float = 0.02,
        index: int = 0,
    ) -> "ExpertLayer":
        prefix = f"layer.{index}"
        d, h = config.hidden_size, config.intermediate_size
        routers = [
            Router(
                normal_parameter(f"{prefix}.router.{t}.embed", (config.num_experts, d), rng, std, dtype),
                iteration=t,
            )
            for t in range(config.num_routers)
        ]
        experts = [
            ExpertFFN.init(f"{prefix}.experts.{e}", d, h, rng, std, dtype)
            for e in range(config.num_experts)
        ]
        shared = [
            SharedExpert.init(f"{prefix}.shared.{s}", d, h, rng, std, dtype)
            for s in range(config.num_shared_experts)
        ]
        return cls(config=config, index=index, routers=routers, experts=experts, shared=shared)

    def parameters(self) -> list[Parameter]:
        params = [router.embed for router in self.routers]
        for expert in [*self.experts, *self.shared]:
            params.extend(expert.parameters())
        return params


def _as_rows(x: Tensor) -> Tensor:
    return reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def affinities(router: Router, x: Tensor) -> Tensor:
    """
    Softmax over the N router dot products e_i . x.

    Args:
        router (Router): Router whose ``embed`` rows are the expert vectors.
        x (Tensor): One token ``[d]`` or a batch ``[tokens, d]``.

    Returns:
        Tensor: Scores ``[N]`` or ``[tokens, N]``, each row summing to 1.
    """
    if x.shape[-1] != router.hidden_size:
        raise DimensionError(f"affinities: input {x.shape} does not match router {router.embed.shape}")
    logits = matmul(_as_rows(x), transpose(router.embed.tensor, (1, 0)))
    scores = softmax_rows(logits)
    return reshape(scores, (router.num_experts,)) if x.ndim == 1 else scores


def select_topk(scores: Tensor, k: int) -> GateVector:
    """
    Keeps the k largest scores of each row as gates; ties go to the lower expert index.

    Raises:
        UsageError: If k lies outside [1, N].
    """
    num_experts = scores.shape[-1]
    if not 1 <= k <= num_experts:
        raise UsageError(f"select_topk: k={k} outside [1, {num_experts}]")
    order = np.argsort(-scores.data, axis=-1, kind="stable")[..., :k]
    indices = np.sort(order, axis=-1)
    mask = np.zeros(scores.shape, dtype=scores.dtype)
    np.put_along_axis(mask, indices, 1.0, axis=-1)
    return GateVector(weights=mul(scores, Tensor(mask)), indices=indices)


def _gate_column(weights: Tensor, rows: np.ndarray, expert: int) -> Tensor:
    one_hot = np.zeros((weights.shape[1], 1), dtype=weights.dtype)
    one_hot[expert, 0] = 1.0
    column = matmul(take_rows(weights, rows), Tensor(one_hot))
    return reshape(column, (rows.shape[0],))


def apply_experts(
    experts: Sequence[ExpertFFN],
    gates: GateVector,
    x: Tensor,
    counter: Optional[InvocationCounter] = None,
) -> Tensor:
    """
    Gate-weighted sum of the selected experts' outputs.

    Each expert runs once on exactly the tokens that selected it, so a token
    triggers k expert forward passes.

    Args:
        experts (Sequence[ExpertFFN]): Routed experts, indexed like the gate.
        gates (GateVector): Selection and weights for ``x``.
        x (Tensor): One token ``[d]`` or a batch ``[tokens, d]``.
        counter (InvocationCounter, optional): Receives one count per token per expert pass.

    Returns:
        Tensor: Same shape as ``x``.
    """
    if len(experts) != gates.num_experts:
        raise DimensionError(
            f"apply_experts: {len(experts)} experts for a gate over {gates.num_experts}"
        )
    rows_x = _as_rows(x)
    weights = _as_rows(gates.weights)
    indices = gates.indices.reshape(weights.shape[0], -1)
    num_tokens = rows_x.shape[0]

    out: Optional[Tensor] = None
    for e, expert in enumerate(experts):
        rows = np.nonzero((indices == e).any(axis=1))[0]
        if rows.size == 0:
            continue
        produced = expert(take_rows(rows_x, rows))
        weighted = scale_rows(produced, _gate_column(weights, rows, e))
        contribution = scatter_rows(weighted, rows, num_tokens)
        out = contribution if out is None else add(out, contribution)
        if counter is not None:
            counter.add(rows)

    if out is None:
        out = Tensor(np.zeros(rows_x.shape, dtype=x.dtype))
    return reshape(out, x.shape) if x.ndim == 1 else out


def apply_shared(shared: Sequence[SharedExpert], x: Tensor) -> Tensor:
    """Unweighted sum of every shared expert; zeros when there are none."""
    out: Optional[Tensor] = None
    for expert in shared:
        produced = expert(_as_rows(x))
        out = produced if out is None else add(out, produced)
    if out is None:
        return Tensor(np.zeros(x.shape, dtype=x.dtype))
    return reshape(out, x.shape) if x.ndim == 1 else out


def load_balance_penalty(scores: Tensor, gates: GateVector, coef: float) -> Tensor:
    """
    Switch-style auxiliary penalty ``coef * N * sum_i f_i * P_i``.

    ``f_i`` (share of selections that went to expert i) is a constant;
    ``P_i`` (mean router probability of expert i) carries the gradient.
    """
    rows = _as_rows(scores)
    num_tokens, num_experts = rows.shape
    selections = np.bincount(gates.indices.reshape(-1), minlength=num_experts)
    fraction = (selections / selections.sum()).astype(scores.dtype).reshape(num_experts, 1)
    averager = np.full((1, num_tokens), 1.0 / num_tokens, dtype=scores.dtype)
    mean_probs = matmul(Tensor(averager), rows)
    penalty = reshape(matmul(mean_probs, Tensor(fraction)), ())
    return scale(penalty, coef * num_experts)


def trace_step(gates: GateVector, counter: InvocationCounter) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    indices = gates.indices.reshape(counter.counts.shape[0], -1)
    values = gates.values().reshape(indices.shape)
    return indices, values, counter.counts.copy()


def moe_forward(
    layer: ExpertLayer, x: Tensor, aux_losses: Optional[list[Tensor]] = None
) -> tuple[Tensor, RoutingTrace]:
    """
    Single-pass mixture: shared experts plus the top-K gated routed experts.

    Uses the layer's first router and selects ``total_k`` experts at once,
    whatever the layer's iteration count.

    Returns:
        tuple[Tensor, RoutingTrace]: Output shaped like ``x`` and a one-iteration trace.
    """
    scores = affinities(layer.routers[0], x)
    gates = select_topk(scores, layer.config.total_k)
    if aux_losses is not None and layer.config.load_balance_coef > 0:
        aux_losses.append(load_balance_penalty(scores, gates, layer.config.load_balance_coef))
    counter = InvocationCounter(1 if x.ndim == 1 else x.shape[0])
    out = add(apply_shared(layer.shared, x), apply_experts(layer.experts, gates, x, counter))
    indices, values, counts = trace_step(gates, counter)
    trace = RoutingTrace(
        layer=layer.index,
        indices=indices[:, None, :],
        gates=values[:, None, :],
        invocations=counts[:, None],
    )
    return out, trace
