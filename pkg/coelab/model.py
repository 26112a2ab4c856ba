"""
Decoder-only transformer whose feed-forward sublayers are expert chains.

Pre-norm blocks with rmsnorm, causal multi-head attention with rotary
position embeddings, a final norm and an untied output head.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .chain import coe_forward
from .config.errors import ConfigurationError, DimensionError
from .config.schemas import ModelConfig
from .experts import ExpertLayer, RoutingTrace
from .seeds import stream
from .tensors import (
    Parameter,
    Tensor,
    add,
    bmm,
    causal_mask,
    dtype_of,
    matmul,
    normal_parameter,
    ones_parameter,
    reshape,
    rmsnorm,
    rotary,
    scale,
    softmax_rows,
    take_rows,
    transpose,
)


@dataclass(eq=False)
class Attention:
    q_proj: Parameter
    k_proj: Parameter
    v_proj: Parameter
    o_proj: Parameter

    @classmethod
    def init(cls, prefix: str, hidden: int, rng: np.random.Generator, std: float, dtype: np.dtype) -> "Attention":
        return cls(
            *(
                normal_parameter(f"{prefix}.{name}", (hidden, hidden), rng, std, dtype)
                for name in ("q_proj", "k_proj", "v_proj", "o_proj")
            )
        )

    def parameters(self) -> list[Parameter]:
        return [self.q_proj, self.k_proj, self.v_proj, self.o_proj]


@dataclass(eq=False)
class TransformerBlock:
    attn_norm: Parameter
    attention: Attention
    ffn_norm: Parameter
    experts: ExpertLayer

    def parameters(self) -> list[Parameter]:
        return [self.attn_norm, *self.attention.parameters(), self.ffn_norm, *self.experts.parameters()]


def rotary_tables(length: int, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.outer(np.arange(length, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


class CoEModel:
    """Parameter registry plus the fixed tables a forward pass needs."""

    def __init__(
        self,
        config: ModelConfig,
        embed: Parameter,
        blocks: list[TransformerBlock],
        final_norm: Parameter,
        lm_head: Parameter,
    ):
        self.config = config
        self.embed = embed
        self.blocks = blocks
        self.final_norm = final_norm
        self.lm_head = lm_head
        cos, sin = rotary_tables(config.max_seq_len, config.head_dim, config.rope_theta)
        self.rotary_cos = cos.astype(embed.tensor.dtype)
        self.rotary_sin = sin.astype(embed.tensor.dtype)

        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ConfigurationError("duplicate parameter names in model")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, precision: str = "f64") -> "CoEModel":
        """
        Builds a freshly initialised model.

        Projections and embeddings draw from normal(0, init_std) on the
        seed's ``init`` stream; norm weights start at one.
        """
        rng = stream(seed, "init")
        dtype = dtype_of(precision)
        d, std = config.hidden_size, config.init_std
        embed = normal_parameter("embed", (config.vocab_size, d), rng, std, dtype, weight_decay=False)
        blocks = []
        for i in range(config.num_layers):
            blocks.append(
                TransformerBlock(
                    attn_norm=ones_parameter(f"layer.{i}.attn_norm", d, dtype),
                    attention=Attention.init(f"layer.{i}.attn", d, rng, std, dtype),
                    ffn_norm=ones_parameter(f"layer.{i}.ffn_norm", d, dtype),
                    experts=ExpertLayer.init(config.coe, rng, dtype, std=std, index=i),
                )
            )
        final_norm = ones_parameter("final_norm", d, dtype)
        lm_head = normal_parameter("lm_head", (d, config.vocab_size), rng, std, dtype)
        return cls(config, embed, blocks, final_norm, lm_head)

    @property
    def dtype(self) -> np.dtype:
        return self.embed.tensor.dtype

    def parameters(self) -> list[Parameter]:
        params = [self.embed]
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend([self.final_norm, self.lm_head])
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


def _attention(model: CoEModel, attention: Attention, x: Tensor, batch: int, length: int) -> Tensor:
    heads, head_dim = model.config.num_heads, model.config.head_dim
    cos, sin = model.rotary_cos[:length], model.rotary_sin[:length]

    def split_heads(projected: Tensor) -> Tensor:
        grouped = transpose(reshape(projected, (batch, length, heads, head_dim)), (0, 2, 1, 3))
        return reshape(grouped, (batch * heads, length, head_dim))

    q = rotary(split_heads(matmul(x, attention.q_proj.tensor)), cos, sin)
    k = rotary(split_heads(matmul(x, attention.k_proj.tensor)), cos, sin)
    v = split_heads(matmul(x, attention.v_proj.tensor))

    scores = scale(bmm(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(head_dim))
    probs = softmax_rows(causal_mask(scores))
    context = reshape(bmm(probs, v), (batch, heads, length, head_dim))
    merged = reshape(transpose(context, (0, 2, 1, 3)), (batch * length, model.config.hidden_size))
    return matmul(merged, attention.o_proj.tensor)


def model_forward(
    model: CoEModel,
    ids: np.ndarray,
    capture_trace: bool = True,
    aux_losses: Optional[list[Tensor]] = None,
) -> tuple[Tensor, list[Optional[RoutingTrace]]]:
    """
    Causal language-model forward pass.

    Args:
        model (CoEModel): The model.
        ids (np.ndarray): Token ids, shape ``[T]`` or ``[B, T]``.
        capture_trace (bool): Return a routing trace per layer.
        aux_losses (list[Tensor], optional): Collects load-balance penalties.

    Returns:
        tuple[Tensor, list]: Logits ``[B*T, V]`` and one trace (or None) per layer.

    Raises:
        IndexError: If an id lies outside [0, V).
        DimensionError: If the sequence is longer than ``max_seq_len``.
    """
    config = model.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    batch, length = ids.shape
    if length > config.max_seq_len:
        raise DimensionError(f"sequence length {length} exceeds max_seq_len={config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError(f"token id outside [0, {config.vocab_size})")

    hidden = take_rows(model.embed.tensor, ids.reshape(-1))
    traces: list[Optional[RoutingTrace]] = []
    for block in model.blocks:
        normed = rmsnorm(hidden, block.attn_norm.tensor, config.norm_eps)
        hidden = add(hidden, _attention(model, block.attention, normed, batch, length))
        normed = rmsnorm(hidden, block.ffn_norm.tensor, config.norm_eps)
        mixed, trace = coe_forward(config.coe, block.experts, normed, capture_trace, aux_losses)
        hidden = add(hidden, mixed)
        traces.append(trace)

    hidden = rmsnorm(hidden, model.final_norm.tensor, config.norm_eps)
    return matmul(hidden, model.lm_head.tensor), traces


@dataclass(frozen=True)
class ParameterCounts:
    routed_experts: int
    shared_experts: int
    routers: int
    attention: int
    norms: int
    embedding: int
    lm_head: int
    non_embedding: int
    total: int

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


def expert_parameter_count(hidden: int, intermediate: int) -> int:
    return 3 * hidden * intermediate


def param_count(config: ModelConfig) -> ParameterCounts:
    """Exact analytic parameter counts; embedding and output head are listed separately."""
    coe, layers, d = config.coe, config.num_layers, config.hidden_size
    per_expert = expert_parameter_count(d, coe.intermediate_size)
    routed = coe.num_experts * layers * per_expert
    shared = coe.num_shared_experts * layers * per_expert
    routers = coe.num_routers * layers * coe.num_experts * d
    attention = 4 * layers * d * d
    norms = 2 * layers * d + d
    embedding = config.vocab_size * d
    lm_head = d * config.vocab_size
    non_embedding = routed + shared + routers + attention + norms
    return ParameterCounts(
        routed_experts=routed,
        shared_experts=shared,
        routers=routers,
        attention=attention,
        norms=norms,
        embedding=embedding,
        lm_head=lm_head,
        non_embedding=non_embedding,
        total=non_embedding + embedding + lm_head,
    )


def count_registered_parameters(model: CoEModel) -> int:
    return sum(p.size for p in model.parameters() if p.trainable)
