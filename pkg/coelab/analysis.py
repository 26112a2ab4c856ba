"""
Routing and cost analyses: expert co-activation across iterations, exact
combinatorial flexibility of chained selection, and an analytic cost model.
"""

import csv
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config.errors import DimensionError, DomainError
from .config.logger import logger
from .config.schemas import ModelConfig
from .config.settings import HEATMAP_HEADER, HEATMAP_PATTERN, ROUTING_SUMMARY_FILE
from .experts import RoutingTrace
from .files import ensure_directory
from .json_utils import write_json_file
from .model import ParameterCounts, param_count

ADAMW_STATE_MULTIPLIER = 3


@dataclass
class CoActivationMatrix:
    """``counts[p, q]``: tokens served by expert p at one iteration and expert q at the next."""

    layer: int
    counts: np.ndarray  # (N, N) int64

    @property
    def num_experts(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        """Row-normalised copy; all-zero rows stay zero."""
        sums = self.counts.sum(axis=1, keepdims=True)
        return np.divide(
            self.counts, sums, out=np.zeros(self.counts.shape, dtype=np.float64), where=sums > 0
        )

    def merge(self, other: "CoActivationMatrix") -> "CoActivationMatrix":
        if other.layer != self.layer or other.counts.shape != self.counts.shape:
            raise DimensionError(
                f"cannot merge layer {other.layer} {other.counts.shape} into layer {self.layer} {self.counts.shape}"
            )
        return CoActivationMatrix(self.layer, self.counts + other.counts)


def accumulate_coactivation(
    traces: Sequence[RoutingTrace], num_experts: int
) -> list[CoActivationMatrix]:
    """
    Builds one co-activation matrix per layer trace.

    For every token and consecutive iteration pair (t, t+1), each pair in the
    cross product of the two selected sets adds one count, so a layer totals
    ``tokens * (K/C)**2 * (C-1)``.

    Args:
        traces (Sequence[RoutingTrace]): One trace per layer.
        num_experts (int): N, the matrix side.

    Returns:
        list[CoActivationMatrix]: Matrices in trace order; all zero when C=1.

    Raises:
        DimensionError: If a trace names an expert id outside [0, N).
    """
    matrices = []
    for trace in traces:
        counts = np.zeros((num_experts, num_experts), dtype=np.int64)
        if trace.indices.size and (trace.indices.min() < 0 or trace.indices.max() >= num_experts):
            raise DimensionError(
                f"layer {trace.layer}: trace names expert ids outside [0, {num_experts})"
            )
        if trace.num_iterations < 2:
            logger.warning(f"layer {trace.layer}: single iteration, co-activation matrix is empty")
        for t in range(trace.num_iterations - 1):
            prev = trace.indices[:, t, :]
            nxt = trace.indices[:, t + 1, :]
            rows = np.broadcast_to(prev[:, :, None], (prev.shape[0], prev.shape[1], nxt.shape[1]))
            cols = np.broadcast_to(nxt[:, None, :], rows.shape)
            np.add.at(counts, (rows.reshape(-1), cols.reshape(-1)), 1)
        matrices.append(CoActivationMatrix(trace.layer, counts))
    return matrices


class PascalTable:
    """Exact binomial coefficients from the additive recurrence, rows cached as they grow."""

    def __init__(self):
        self._rows: list[list[int]] = [[1]]

    def _extend(self, n: int) -> None:
        while len(self._rows) <= n:
            last = self._rows[-1]
            self._rows.append([1, *(a + b for a, b in zip(last, last[1:])), 1])

    def __call__(self, n: int, k: int) -> int:
        if n < 0 or k < 0:
            raise DomainError(f"binomial({n}, {k}): arguments must be non-negative")
        if k > n:
            raise DomainError(f"binomial({n}, {k}): k exceeds n")
        self._extend(n)
        return self._rows[n][k]


binomial = PascalTable()


@dataclass(frozen=True)
class CombinatoricsReport:
    n: int
    k: int
    iterations: int
    combos_coe: int
    combos_moe: int
    ratio: Fraction

    @property
    def ratio_decimal(self) -> float:
        return self.ratio.numerator / self.ratio.denominator

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "C": self.iterations,
            "combos_coe": self.combos_coe,
            "combos_moe": self.combos_moe,
            "ratio_exact": f"{self.ratio.numerator}/{self.ratio.denominator}",
            "ratio": self.ratio_decimal,
        }


def combination_ratio(n: int, k: int, iterations: int) -> CombinatoricsReport:
    """
    Counts expert combinations: C chained k-of-n selections vs one (C*k)-of-n selection.

    Raises:
        DomainError: If C < 1, k < 0 or C*k > n.
    """
    if iterations < 1 or k < 0:
        raise DomainError(f"combination_ratio: need C >= 1 and k >= 0, got C={iterations}, k={k}")
    if iterations * k > n:
        raise DomainError(f"combination_ratio: C*k={iterations * k} exceeds n={n}")
    coe = binomial(n, k) ** iterations
    moe = binomial(n, iterations * k)
    return CombinatoricsReport(n, k, iterations, coe, moe, Fraction(coe, moe))


def ordered_disjoint_selections(n: int, k: int, iterations: int) -> int:
    """Sequences of C pairwise-disjoint k-subsets of n: a lower bound on binomial(n, k)**C."""
    if k == 0:
        return 1
    total = binomial(n, iterations * k)
    for remaining in range(iterations * k, k, -k):
        total *= binomial(remaining, k)
    return total


@dataclass(frozen=True)
class ConfigCost:
    parameters: ParameterCounts
    num_layers: int
    invocations_per_token_per_layer: int
    invocations_per_token: int
    routers_per_layer: int
    optimizer_state_parameters: int

    @classmethod
    def of(cls, config: ModelConfig) -> "ConfigCost":
        counts = param_count(config)
        return cls(
            parameters=counts,
            num_layers=config.num_layers,
            invocations_per_token_per_layer=config.coe.total_k,
            invocations_per_token=config.coe.total_k * config.num_layers,
            routers_per_layer=config.coe.num_routers,
            optimizer_state_parameters=ADAMW_STATE_MULTIPLIER * counts.total,
        )

    def axes(self) -> dict[str, int]:
        return {
            "total_parameters": self.parameters.total,
            "non_embedding_parameters": self.parameters.non_embedding,
            "routed_expert_parameters": self.parameters.routed_experts,
            "expert_parameters": self.parameters.routed_experts + self.parameters.shared_experts,
            "invocations_per_token_per_layer": self.invocations_per_token_per_layer,
            "invocations_per_token": self.invocations_per_token,
            "routers_per_layer": self.routers_per_layer,
            "optimizer_state_parameters": self.optimizer_state_parameters,
        }


def percent_delta(a: int, b: int) -> float:
    """Change from a to b relative to their mean; swapping a and b negates it."""
    if a == b:
        return 0.0
    return 200.0 * (b - a) / (a + b)


@dataclass(frozen=True)
class CostReport:
    a: ConfigCost
    b: ConfigCost

    @property
    def delta_percent(self) -> dict[str, float]:
        a, b = self.a.axes(), self.b.axes()
        return {axis: percent_delta(a[axis], b[axis]) for axis in a}

    @property
    def ratio(self) -> dict[str, Optional[float]]:
        a, b = self.a.axes(), self.b.axes()
        return {axis: (b[axis] / a[axis] if a[axis] else None) for axis in a}

    @property
    def dominant(self) -> dict[str, str]:
        """Cheaper configuration per axis: ``a``, ``b`` or ``tie``."""
        a, b = self.a.axes(), self.b.axes()
        return {axis: "tie" if a[axis] == b[axis] else ("a" if a[axis] < b[axis] else "b") for axis in a}

    def as_dict(self) -> dict:
        return {
            "memory_model": "analytic",
            "a": {**asdict(self.a), "axes": self.a.axes()},
            "b": {**asdict(self.b), "axes": self.b.axes()},
            "delta_percent": self.delta_percent,
            "ratio_b_over_a": self.ratio,
            "dominant": self.dominant,
        }


def cost_compare(a: ModelConfig, b: ModelConfig) -> CostReport:
    return CostReport(ConfigCost.of(a), ConfigCost.of(b))


def export_heatmap(matrix: CoActivationMatrix, path: Path) -> Path:
    """
    Writes the nonzero entries of a co-activation matrix as CSV.

    One row per nonzero (prev_expert, next_expert) pair in row-major order,
    followed by a ``# layer=.. experts=.. total=.. nonzero=..`` summary line.

    Raises:
        OSError: If the file cannot be written; the message names the path.
    """
    normalized = matrix.normalized()
    prev, nxt = np.nonzero(matrix.counts)
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(HEATMAP_HEADER)
            for p, q in zip(prev.tolist(), nxt.tolist()):
                writer.writerow([matrix.layer, p, q, int(matrix.counts[p, q]), repr(float(normalized[p, q]))])
            handle.write(
                f"# layer={matrix.layer} experts={matrix.num_experts} "
                f"total={matrix.total} nonzero={prev.size}\n"
            )
    except OSError as e:
        logger.error(f"Error writing heatmap '{path}': {e}")
        raise OSError(f"cannot write heatmap '{path}': {e}") from e
    return path


def read_heatmap(path: Path) -> CoActivationMatrix:
    """
    Parses a CSV written by ``export_heatmap`` back into counts.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the header or summary line is missing or inconsistent.
    """
    if not path.exists():
        logger.error(f"Error: Heatmap '{path}' does not exist.")
        raise FileNotFoundError(f"Heatmap '{path}' does not exist.")
    lines = path.read_text(encoding="utf-8").splitlines()
    summary_lines = [line for line in lines if line.startswith("#")]
    if not summary_lines:
        raise ValueError(f"{path}: missing summary line")
    summary = dict(field.split("=", 1) for field in summary_lines[-1][1:].split())
    layer, experts = int(summary["layer"]), int(summary["experts"])

    rows = list(csv.reader(line for line in lines if not line.startswith("#")))
    if not rows or rows[0] != HEATMAP_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    counts = np.zeros((experts, experts), dtype=np.int64)
    for row in rows[1:]:
        counts[int(row[1]), int(row[2])] = int(row[3])
    matrix = CoActivationMatrix(layer, counts)
    if matrix.total != int(summary["total"]):
        raise ValueError(f"{path}: rows sum to {matrix.total}, summary says {summary['total']}")
    return matrix


def _entropy(usage: np.ndarray) -> float:
    total = usage.sum()
    if total == 0:
        return 0.0
    shares = usage[usage > 0] / total
    return float(-(shares * np.log(shares)).sum())


def routing_summary(trace: RoutingTrace, num_experts: int) -> dict:
    """
    Per-layer routing statistics.

    Usage counts, usage entropy (nats, max ln N) and unused expert ids per
    iteration; for C >= 2 also the self-transition share of co-activation
    and the experts that most often open (largest row sum) and close
    (largest column sum) a chain.
    """
    per_iteration = []
    for t in range(trace.num_iterations):
        usage = np.bincount(trace.indices[:, t, :].reshape(-1), minlength=num_experts)
        per_iteration.append(
            {
                "iteration": t,
                "usage": usage.tolist(),
                "entropy": _entropy(usage),
                "unused_experts": np.nonzero(usage == 0)[0].tolist(),
            }
        )
    summary = {
        "layer": trace.layer,
        "tokens": trace.num_tokens,
        "iterations": trace.num_iterations,
        "max_entropy": math.log(num_experts),
        "per_iteration": per_iteration,
        "diagonal_fraction": None,
        "entry_expert": None,
        "accumulator_expert": None,
    }
    if trace.num_iterations >= 2:
        (matrix,) = accumulate_coactivation([trace], num_experts)
        if matrix.total:
            summary["diagonal_fraction"] = float(np.trace(matrix.counts) / matrix.total)
            summary["entry_expert"] = int(np.argmax(matrix.counts.sum(axis=1)))
            summary["accumulator_expert"] = int(np.argmax(matrix.counts.sum(axis=0)))
    return summary


def write_routing_outputs(
    traces: Sequence[RoutingTrace],
    num_experts: int,
    out_dir: Path,
    emit_summary: bool = True,
) -> list[Path]:
    """Exports one heatmap CSV per layer and, optionally, the routing summary JSON."""
    ensure_directory(out_dir)
    written = []
    for matrix in accumulate_coactivation(traces, num_experts):
        written.append(export_heatmap(matrix, out_dir / HEATMAP_PATTERN.format(layer=matrix.layer)))
    if emit_summary:
        summaries = [routing_summary(trace, num_experts) for trace in traces]
        written.append(write_json_file({"layers": summaries}, out_dir / ROUTING_SUMMARY_FILE))
    logger.info(f"Wrote {len(written)} routing analysis files to '{out_dir}'")
    return written
