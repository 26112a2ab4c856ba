"""
Validated configuration documents.

Every document rejects unknown keys and every field has a default, so ``{}``
is a complete run configuration.
"""

from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..json_utils import read_json_file
from .errors import ConfigurationError
from .settings import BYTE_VOCAB_SIZE

ResidualMode = Literal["inner", "outer", "init", "none"]
GatingMode = Literal["per_iteration", "shared"]


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CoEConfig(_Document):
    num_experts: int = Field(8, ge=1, description="routed experts per layer (N)")
    num_shared_experts: int = Field(
        1, ge=0, description="shared experts applied to every token (M)"
    )
    total_k: int = Field(
        4, ge=1, description="expert selections per token per layer (K)"
    )
    num_iterations: int = Field(
        2, ge=1, description="communication steps per layer (C)"
    )
    residual_mode: ResidualMode = Field(
        "inner", description="intra-layer residual: inner, outer, init or none"
    )
    gating_mode: GatingMode = Field(
        "per_iteration", description="one router per iteration, or one shared"
    )
    intermediate_size: int = Field(64, ge=1, description="expert hidden width (h)")
    hidden_size: int = Field(32, ge=1, description="token embedding width (d)")
    load_balance_coef: float = Field(
        0.0, ge=0.0, description="load-balance penalty weight, 0 disables it"
    )

    @model_validator(mode="after")
    def _check_selection(self) -> "CoEConfig":
        if self.total_k % self.num_iterations != 0:
            raise ValueError(
                f"num_iterations={self.num_iterations} must divide total_k={self.total_k}"
            )
        if self.k_per_iteration > self.num_experts:
            raise ValueError(
                f"total_k/num_iterations={self.k_per_iteration} exceeds num_experts={self.num_experts}"
            )
        return self

    @property
    def k_per_iteration(self) -> int:
        return self.total_k // self.num_iterations

    @property
    def num_routers(self) -> int:
        return self.num_iterations if self.gating_mode == "per_iteration" else 1


class ModelConfig(_Document):
    num_layers: int = Field(2, ge=1, description="transformer blocks (L)")
    hidden_size: int = Field(32, ge=1, description="model width (d)")
    num_heads: int = Field(4, ge=1, description="attention heads")
    vocab_size: int = Field(256, ge=2, description="vocabulary size (V)")
    max_seq_len: int = Field(128, ge=1, description="longest accepted sequence")
    norm_eps: float = Field(1e-6, gt=0.0, description="rmsnorm epsilon")
    rope_theta: float = Field(10000.0, gt=0.0, description="rotary base frequency")
    init_std: float = Field(0.02, gt=0.0, description="projection init std")
    coe: CoEConfig = Field(default_factory=CoEConfig, description="expert layer")

    @model_validator(mode="before")
    @classmethod
    def _inherit_hidden_size(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        hidden = data.get("hidden_size", cls.model_fields["hidden_size"].default)
        coe = data.get("coe")
        if coe is None:
            data = {**data, "coe": {"hidden_size": hidden}}
        elif isinstance(coe, dict) and "hidden_size" not in coe:
            data = {**data, "coe": {**coe, "hidden_size": hidden}}
        return data

    @model_validator(mode="after")
    def _check_shape(self) -> "ModelConfig":
        if self.coe.hidden_size != self.hidden_size:
            raise ValueError(
                f"coe.hidden_size={self.coe.hidden_size} differs from hidden_size={self.hidden_size}"
            )
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size={self.hidden_size} is not divisible by num_heads={self.num_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim={self.head_dim} must be even for rotary")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Architecture shape of the large reference configuration; counting only."""
        return cls(
            num_layers=4,
            hidden_size=1024,
            num_heads=8,
            vocab_size=102400,
            max_seq_len=512,
            coe={
                "num_experts": 63,
                "num_shared_experts": 1,
                "total_k": 8,
                "num_iterations": 2,
                "intermediate_size": 704,
            },
        )


class TrainConfig(_Document):
    learning_rate: float = Field(3e-4, gt=0.0, description="peak learning rate")
    weight_decay: float = Field(0.01, ge=0.0, description="decoupled weight decay")
    betas: tuple[float, float] = Field((0.9, 0.95), description="AdamW betas")
    adam_eps: float = Field(1e-8, gt=0.0, description="AdamW epsilon")
    warmup_fraction: float = Field(
        0.10, gt=0.0, lt=1.0, description="share of steps spent warming up"
    )
    lr_schedule: Literal["linear", "constant"] = Field(
        "linear", description="after warmup: linear decay to 0, or constant"
    )
    total_steps: int = Field(200, ge=2, description="optimizer steps")
    batch_size: int = Field(8, ge=1, description="sequences per step")
    seq_len: int = Field(64, ge=2, description="tokens per sequence")
    clip_norm: float = Field(1.0, gt=0.0, description="global gradient norm limit")
    seed: int = Field(0, ge=0, description="root seed for every random stream")
    precision: Literal["f64", "f32"] = Field("f64", description="element precision")
    eval_interval: int = Field(50, ge=1, description="steps between validations")
    eval_batches: int = Field(4, ge=1, description="validation batches per eval")
    checkpoint_interval: int = Field(100, ge=1, description="steps between checkpoints")
    capture_train_traces: bool = Field(
        False, description="record routing traces on training steps"
    )
    prefetch: bool = Field(True, description="assemble the next batch on a worker thread")
    show_progress: bool = Field(True, description="render a progress bar")

    @model_validator(mode="after")
    def _check_betas(self) -> "TrainConfig":
        for beta in self.betas:
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"betas must lie in [0, 1): {self.betas}")
        return self


class DataConfig(_Document):
    task: Literal["bytes", "copy"] = Field(
        "copy", description="byte-level corpus or synthetic copy task"
    )
    path: str | None = Field(None, description="corpus file for the bytes task")
    validation_fraction: float = Field(
        0.02, gt=0.0, lt=1.0, description="trailing share of corpus held out"
    )
    copy_offset: int = Field(8, ge=1, description="copy task look-back distance")


class AnalysisConfig(_Document):
    output_dir: str = Field("analysis", description="co-activation output directory")
    emit_summary: bool = Field(True, description="write routing_summary.json")


class RunConfig(_Document):
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)

    @model_validator(mode="after")
    def _check_run(self) -> "RunConfig":
        if self.train.seq_len > self.model.max_seq_len:
            raise ValueError(
                f"train.seq_len={self.train.seq_len} exceeds model.max_seq_len={self.model.max_seq_len}"
            )
        if self.data.task == "bytes" and self.model.vocab_size < BYTE_VOCAB_SIZE:
            raise ValueError(
                f"bytes task needs vocab_size >= {BYTE_VOCAB_SIZE}, got {self.model.vocab_size}"
            )
        if self.data.task == "copy" and self.train.seq_len <= self.data.copy_offset:
            raise ValueError(
                f"copy task needs seq_len > copy_offset={self.data.copy_offset}"
            )
        return self

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Return a validated copy with dotted-path overrides applied."""
        document = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            node = document
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return build_run_config(document)


def build_run_config(document: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigurationError(f"{location}: {first['msg']}") from None


def load_run_config(path: Path) -> RunConfig:
    """
    Loads and validates a run configuration file.

    Args:
        path (Path): JSON document with optional sections model, train, data, analysis.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigurationError: If the document is not valid JSON or fails validation.
    """
    try:
        document = read_json_file(path)
    except ValueError as e:
        raise ConfigurationError(str(e)) from None
    return build_run_config(document)


def describe_defaults() -> str:
    """Lists every configuration field with its default, for ``--help``."""
    lines = ["configuration fields (JSON sections) and defaults:"]

    def walk(model: type[BaseModel], prefix: str) -> None:
        for name, field in model.model_fields.items():
            annotation = field.annotation
            if isinstance(annotation, type) and issubclass(annotation, BaseModel):
                walk(annotation, f"{prefix}{name}.")
                continue
            default = field.get_default(call_default_factory=True)
            lines.append(f"  {prefix}{name} = {default!r}  ({field.description})")

    walk(RunConfig, "")
    return "\n".join(lines)
