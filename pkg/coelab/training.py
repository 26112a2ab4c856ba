"""
Training loop, evaluation and model <-> checkpoint conversion.

One step: forward, loss, backward, clip, AdamW update at ``lr_at(step)``.
Steps are numbered from 1; a metrics record is appended per step and per
evaluation, flushed line by line.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from tqdm import tqdm

from .checkpoints import Checkpoint, save_checkpoint
from .config.errors import CheckpointError, NumericError
from .config.logger import logger
from .config.schemas import AnalysisConfig, DataConfig, ModelConfig, TrainConfig
from .config.settings import CHECKPOINT_PATTERN, FINAL_CHECKPOINT, METRICS_FILE
from .data import Batch, DataStream
from .experts import RoutingTrace
from .files import ensure_directory
from .json_utils import append_json_line, read_json_lines
from .model import CoEModel, model_forward
from .optim import OptimizerState, adamw_step, clip_global_norm, global_norm, lr_at
from .tensors import Parameter, Tape, add, backward, cross_entropy, no_grad, precision_of, zero_grads

OPTIMIZER_PREFIX = ("optim.m.", "optim.v.")


@dataclass
class EvalResult:
    loss: float
    tokens: int
    traces: list[RoutingTrace] = field(default_factory=list)


@dataclass
class TrainResult:
    metrics: list[dict]
    final_checkpoint: Path
    final_val_loss: Optional[float]
    state: OptimizerState


def batch_loss(model: CoEModel, batch: Batch, capture_trace: bool, aux_losses=None):
    logits, traces = model_forward(model, batch.inputs, capture_trace, aux_losses)
    return cross_entropy(logits, batch.targets.reshape(-1), batch.ignore_index), traces


def evaluate(model: CoEModel, data: DataStream, config: TrainConfig) -> EvalResult:
    """
    Mean validation loss over the fixed validation batches.

    Routing traces are always captured here, and every batch is checked for
    exactly K/C expert invocations per token per iteration.
    """
    k = model.config.coe.k_per_iteration
    weighted, tokens = 0.0, 0
    merged: list[Optional[RoutingTrace]] = [None] * model.config.num_layers
    with no_grad():
        for batch in data.validation_batches(config.eval_batches):
            loss, traces = batch_loss(model, batch, capture_trace=True)
            count = batch.counted_tokens
            weighted += loss.item() * count
            tokens += count
            for i, trace in enumerate(traces):
                trace.check_parity(k)
                merged[i] = trace if merged[i] is None else merged[i].merge(trace)
    return EvalResult(loss=weighted / tokens, tokens=tokens, traces=[t for t in merged if t is not None])


def snapshot(
    model: CoEModel,
    state: OptimizerState,
    train: TrainConfig,
    data: DataConfig,
    step: int,
    analysis: Optional[AnalysisConfig] = None,
) -> Checkpoint:
    tensors = {p.name: p.data for p in model.parameters()}
    for name in tensors.copy():
        tensors[f"optim.m.{name}"] = state.m[name]
        tensors[f"optim.v.{name}"] = state.v[name]
    meta = {
        "model": model.config.model_dump(mode="json"),
        "train": train.model_dump(mode="json"),
        "data": data.model_dump(mode="json"),
        "analysis": (analysis or AnalysisConfig()).model_dump(mode="json"),
        "step": step,
        "optimizer_step": state.step,
    }
    return Checkpoint(tensors=tensors, meta=meta)


def model_from_checkpoint(checkpoint: Checkpoint) -> CoEModel:
    """
    Rebuilds the model a checkpoint describes and loads its weights.

    Raises:
        CheckpointError: If the stored configuration or any tensor does not fit.
    """
    try:
        config = ModelConfig.model_validate(checkpoint.meta["model"])
    except (KeyError, ValueError) as e:
        raise CheckpointError("__meta__.model", str(e)) from None
    sample = next((a for n, a in checkpoint.tensors.items() if not n.startswith(OPTIMIZER_PREFIX)), None)
    if sample is None:
        raise CheckpointError("tensors", "no model tensors")
    model = CoEModel.init(config, seed=0, precision=precision_of(sample.dtype))
    load_weights(model, checkpoint)
    return model


def load_weights(model: CoEModel, checkpoint: Checkpoint) -> None:
    params = model.parameters()
    for param in params:
        stored = checkpoint.tensors.get(param.name)
        if stored is None:
            raise CheckpointError(param.name, "missing tensor")
        if stored.shape != param.shape:
            raise CheckpointError(f"{param.name}.shape", f"{stored.shape} != {param.shape}")
        if stored.dtype != param.tensor.dtype:
            raise CheckpointError(f"{param.name}.dtype", f"{stored.dtype} != {param.tensor.dtype}")
    for param in params:
        param.tensor.data = checkpoint.tensors[param.name].copy()


def optimizer_from_checkpoint(model: CoEModel, checkpoint: Checkpoint) -> OptimizerState:
    state = OptimizerState(step=int(checkpoint.meta.get("optimizer_step", checkpoint.step)))
    for param in model.parameters():
        for prefix, moments in (("optim.m.", state.m), ("optim.v.", state.v)):
            stored = checkpoint.tensors.get(prefix + param.name)
            if stored is None or stored.shape != param.shape:
                raise CheckpointError(prefix + param.name, "missing or mis-shaped optimizer moment")
            moments[param.name] = stored.copy()
    return state


def _record(step: int, split: str, loss: float, lr: float, tokens_seen: int, grad_norm: float) -> dict:
    return {
        "step": step,
        "split": split,
        "loss": loss,
        "lr": lr,
        "tokens_seen": tokens_seen,
        "grad_norm": grad_norm,
    }


def _check_finite(params: list[Parameter], grads: list[np.ndarray], step: int) -> None:
    for param, grad in zip(params, grads):
        if not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient in '{param.name}' at step {step}; keeping previous checkpoints")
            raise NumericError(f"non-finite gradient in parameter '{param.name}' at step {step}")


def _truncate_metrics(path: Path, step: int) -> None:
    """Drops records logged after ``step`` so a resumed run appends onto a consistent file."""
    if not path.exists():
        return
    kept = [record for record in read_json_lines(path) if record["step"] <= step]
    with open(path, "w", encoding="utf-8") as handle:
        for record in kept:
            append_json_line(handle, record)


def train(
    model: CoEModel,
    data: DataStream,
    config: TrainConfig,
    out_dir: Path,
    resume: Optional[Checkpoint] = None,
    analysis: Optional[AnalysisConfig] = None,
) -> TrainResult:
    """
    Runs the optimisation loop and writes metrics and checkpoints to ``out_dir``.

    Args:
        model (CoEModel): Model to train, updated in place.
        data (DataStream): Batches as a pure function of (seed, step).
        config (TrainConfig): Optimiser, schedule and loop settings.
        out_dir (Path): Receives ``metrics.jsonl``, periodic checkpoints and ``final.ckpt``.
        resume (Checkpoint, optional): Continue from this checkpoint's step. Records
            past that step are dropped from an existing ``metrics.jsonl``.
        analysis (AnalysisConfig, optional): Stored in every checkpoint for ``eval``.

    Returns:
        TrainResult: All metric records written by this call and the final checkpoint path.

    Raises:
        NumericError: On a non-finite loss or gradient; earlier checkpoints stay on disk.
    """
    ensure_directory(out_dir)
    params = [p for p in model.parameters() if p.trainable]
    if resume is not None:
        load_weights(model, resume)
        state = optimizer_from_checkpoint(model, resume)
        start = resume.step
        logger.info(f"Resuming from step {start}")
    else:
        state = OptimizerState.zeros(params)
        start = 0

    metrics: list[dict] = []
    final_val: Optional[float] = None
    tokens_seen = start * data.tokens_per_batch
    if resume is not None:
        _truncate_metrics(out_dir / METRICS_FILE, start)
    mode = "a" if resume is not None else "w"
    executor = ThreadPoolExecutor(max_workers=1) if config.prefetch else None

    def fetch(step: int):
        if executor is None:
            return None
        return executor.submit(data.train_batch, step)

    logger.info(
        f"Training steps {start + 1}..{config.total_steps} "
        f"({len(params)} tensors, {sum(p.size for p in params)} parameters)"
    )
    try:
        with open(out_dir / METRICS_FILE, mode, buffering=1, encoding="utf-8") as handle:
            pending = fetch(start + 1)
            steps = range(start + 1, config.total_steps + 1)
            for step in tqdm(steps, desc="train", disable=not config.show_progress):
                batch = pending.result() if pending is not None else data.train_batch(step)
                if step < config.total_steps:
                    pending = fetch(step + 1)

                zero_grads(params)
                aux_losses = []
                with Tape() as tape:
                    loss, _ = batch_loss(model, batch, config.capture_train_traces, aux_losses)
                    objective = loss
                    for penalty in aux_losses:
                        objective = add(objective, penalty)
                loss_value = loss.item()
                if not np.isfinite(objective.item()):
                    logger.error(f"Non-finite loss at step {step}; keeping previous checkpoints")
                    raise NumericError(f"non-finite loss at step {step}")

                backward(tape, objective)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                _check_finite(params, grads, step)
                grad_norm = global_norm(grads)
                clip_global_norm(grads, config.clip_norm)
                rate = lr_at(config, step)
                adamw_step(params, grads, state, rate, config)
                tokens_seen += data.tokens_per_batch

                record = _record(step, "train", loss_value, rate, tokens_seen, grad_norm)
                append_json_line(handle, record)
                metrics.append(record)

                if step % config.eval_interval == 0 or step == config.total_steps:
                    result = evaluate(model, data, config)
                    final_val = result.loss
                    record = _record(step, "val", result.loss, rate, tokens_seen, 0.0)
                    append_json_line(handle, record)
                    metrics.append(record)
                    logger.info(f"step {step}: train loss {loss_value:.4f}, val loss {result.loss:.4f}")

                if step % config.checkpoint_interval == 0 and step < config.total_steps:
                    save_checkpoint(
                        snapshot(model, state, config, data.config, step, analysis),
                        out_dir / CHECKPOINT_PATTERN.format(step=step),
                    )
    finally:
        if executor is not None:
            executor.shutdown(wait=True, cancel_futures=True)

    final = save_checkpoint(
        snapshot(model, state, config, data.config, config.total_steps, analysis),
        out_dir / FINAL_CHECKPOINT,
    )
    return TrainResult(metrics=metrics, final_checkpoint=final, final_val_loss=final_val, state=state)
