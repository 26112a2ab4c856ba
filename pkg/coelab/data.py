"""
Training and validation batches.

Every batch is a pure function of (seed, step): the training stream never
carries state between steps, so resuming at step s sees the same data as an
uninterrupted run.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config.errors import ConfigurationError
from .config.logger import logger
from .config.schemas import DataConfig, TrainConfig
from .files import read_corpus_bytes
from .seeds import stream

IGNORE_INDEX = -1


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (B, T)
    targets: np.ndarray  # (B, T)
    ignore_index: Optional[int] = None

    @property
    def counted_tokens(self) -> int:
        if self.ignore_index is None:
            return int(self.targets.size)
        return int(np.count_nonzero(self.targets != self.ignore_index))


class DataStream:
    """
    Byte-level corpus windows or synthetic copy-task sequences.

    For the byte task the final ``validation_fraction`` of the corpus is held
    out contiguously; training windows never reach into it.
    """

    def __init__(
        self,
        config: DataConfig,
        seed: int,
        batch_size: int,
        seq_len: int,
        vocab_size: int,
        corpus: Optional[bytes] = None,
    ):
        self.config = config
        self.seed = seed
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.vocab_size = vocab_size

        if config.task == "bytes":
            if corpus is None:
                raise ConfigurationError("data.path: the bytes task needs a corpus file")
            tokens = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
            held_out = math.ceil(config.validation_fraction * tokens.size)
            self.train_tokens = tokens[: tokens.size - held_out]
            self.validation_tokens = tokens[tokens.size - held_out :]
            for split, part in (("train", self.train_tokens), ("validation", self.validation_tokens)):
                if part.size < seq_len + 1:
                    raise ConfigurationError(
                        f"data.path: {split} split has {part.size} bytes, needs at least {seq_len + 1}"
                    )
            logger.info(
                f"Byte corpus: {self.train_tokens.size} train / {self.validation_tokens.size} validation bytes"
            )
        elif seq_len <= config.copy_offset:
            raise ConfigurationError(f"copy task needs seq_len > copy_offset={config.copy_offset}")

    @classmethod
    def from_config(
        cls,
        config: DataConfig,
        train: TrainConfig,
        vocab_size: int,
        path: Optional[Path] = None,
    ) -> "DataStream":
        corpus = None
        source = path if path is not None else (Path(config.path) if config.path else None)
        if config.task == "bytes":
            if source is None:
                raise ConfigurationError("data.path: the bytes task needs a corpus file")
            corpus = read_corpus_bytes(source)
        return cls(config, train.seed, train.batch_size, train.seq_len, vocab_size, corpus)

    @property
    def tokens_per_batch(self) -> int:
        return self.batch_size * self.seq_len

    def _copy_batch(self, rng: np.random.Generator, count: int) -> Batch:
        offset = self.config.copy_offset
        inputs = rng.integers(0, self.vocab_size, size=(count, self.seq_len), dtype=np.int64)
        targets = np.full_like(inputs, IGNORE_INDEX)
        targets[:, offset:] = inputs[:, :-offset]
        return Batch(inputs, targets, IGNORE_INDEX)

    def _windows(self, tokens: np.ndarray, starts: np.ndarray) -> Batch:
        positions = starts[:, None] + np.arange(self.seq_len + 1)[None, :]
        windows = tokens[positions]
        return Batch(windows[:, :-1], windows[:, 1:])

    def train_batch(self, step: int) -> Batch:
        rng = stream(self.seed, "data", step)
        if self.config.task == "copy":
            return self._copy_batch(rng, self.batch_size)
        starts = rng.integers(0, self.train_tokens.size - self.seq_len, size=self.batch_size)
        return self._windows(self.train_tokens, starts)

    def validation_batches(self, count: int) -> list[Batch]:
        """Fixed validation batches: consecutive non-overlapping windows of the held-out split."""
        if self.config.task == "copy":
            return [
                self._copy_batch(stream(self.seed, "validation", i), self.batch_size)
                for i in range(count)
            ]
        available = (self.validation_tokens.size - 1) // self.seq_len
        starts = np.arange(min(available, count * self.batch_size), dtype=np.int64) * self.seq_len
        return [
            self._windows(self.validation_tokens, starts[i : i + self.batch_size])
            for i in range(0, starts.size, self.batch_size)
        ]
