import numpy as np
import pytest

from coelab.config.schemas import RunConfig, build_run_config

WORDS = ("the", "expert", "routes", "a", "token", "to", "next", "layer", "and", "back", "again", "with", "state")


@pytest.fixture
def run_document() -> dict:
    """A one-layer copy-task run small enough to train in a test."""
    return {
        "model": {
            "num_layers": 1,
            "hidden_size": 16,
            "num_heads": 2,
            "vocab_size": 12,
            "max_seq_len": 16,
            "coe": {"num_experts": 4, "total_k": 2, "num_iterations": 2, "intermediate_size": 8},
        },
        "train": {
            "total_steps": 8,
            "batch_size": 2,
            "seq_len": 12,
            "eval_interval": 4,
            "eval_batches": 2,
            "checkpoint_interval": 4,
            "learning_rate": 3e-3,
            "show_progress": False,
        },
        "data": {"task": "copy"},
    }


@pytest.fixture
def tiny_run(run_document) -> RunConfig:
    return build_run_config(run_document)


@pytest.fixture
def corpus_file(tmp_path):
    """Plain-text corpus of a few thousand words drawn from a small vocabulary."""
    rng = np.random.default_rng(0)
    text = " ".join(WORDS[i] for i in rng.integers(0, len(WORDS), size=3000)) + "\n"
    path = tmp_path / "corpus.txt"
    path.write_text(text, encoding="utf-8")
    return path
