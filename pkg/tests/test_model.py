import math

import numpy as np
import pytest

from coelab.config.errors import ConfigurationError, DimensionError
from coelab.config.schemas import ModelConfig
from coelab.model import (
    CoEModel,
    count_registered_parameters,
    expert_parameter_count,
    model_forward,
    param_count,
)
from coelab.tensors import Tape, backward, cross_entropy


def tiny_config(**overrides) -> ModelConfig:
    document = {
        "num_layers": 2,
        "hidden_size": 32,
        "num_heads": 4,
        "vocab_size": 17,
        "max_seq_len": 16,
        "coe": {"num_experts": 4, "total_k": 2, "num_iterations": 2, "intermediate_size": 16},
    }
    document.update(overrides)
    return ModelConfig.model_validate(document)


@pytest.fixture
def tiny_model():
    return CoEModel.init(tiny_config(), seed=0)


def test_forward_shapes(tiny_model):
    ids = np.random.default_rng(0).integers(0, 17, size=(3, 10))
    logits, traces = model_forward(tiny_model, ids)
    assert logits.shape == (30, 17)
    assert len(traces) == 2
    assert traces[1].layer == 1
    assert traces[0].indices.shape == (30, 2, 1)


def test_one_dimensional_ids(tiny_model):
    logits, _ = model_forward(tiny_model, np.arange(7))
    assert logits.shape == (7, 17)


def test_causality(tiny_model):
    ids = np.random.default_rng(1).integers(0, 17, size=(1, 12))
    changed = ids.copy()
    changed[0, -1] = (changed[0, -1] + 5) % 17
    before, _ = model_forward(tiny_model, ids)
    after, _ = model_forward(tiny_model, changed)
    np.testing.assert_array_equal(before.data[:-1], after.data[:-1])
    assert not np.array_equal(before.data[-1], after.data[-1])


def test_zero_output_head_gives_zero_logits(tiny_model):
    tiny_model.lm_head.tensor.data[...] = 0.0
    logits, _ = model_forward(tiny_model, np.arange(5))
    np.testing.assert_array_equal(logits.data, np.zeros((5, 17)))


def test_rejects_bad_ids_and_length(tiny_model):
    with pytest.raises(IndexError):
        model_forward(tiny_model, np.array([0, 17]))
    with pytest.raises(IndexError):
        model_forward(tiny_model, np.array([-1, 2]))
    with pytest.raises(DimensionError):
        model_forward(tiny_model, np.zeros(17, dtype=np.int64))


def test_initial_loss_is_near_uniform():
    config = ModelConfig()
    model = CoEModel.init(config, seed=3)
    ids = np.random.default_rng(3).integers(0, 256, size=(2, 32))
    logits, _ = model_forward(model, ids[:, :-1])
    loss = cross_entropy(logits, ids[:, 1:].reshape(-1)).item()
    assert abs(loss - math.log(256)) < 0.3


def test_initialisation_is_deterministic():
    a = CoEModel.init(tiny_config(), seed=5)
    b = CoEModel.init(tiny_config(), seed=5)
    c = CoEModel.init(tiny_config(), seed=6)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert not np.array_equal(a.embed.data, c.embed.data)


def test_f32_precision():
    model = CoEModel.init(tiny_config(), seed=0, precision="f32")
    logits, _ = model_forward(model, np.arange(4))
    assert logits.dtype == np.float32
    assert all(p.tensor.dtype == np.float32 for p in model.parameters())


def test_parameter_names_are_hierarchical_and_unique(tiny_model):
    names = [p.name for p in tiny_model.parameters()]
    assert len(names) == len(set(names))
    for expected in (
        "embed",
        "layer.0.attn.q_proj",
        "layer.1.router.1.embed",
        "layer.1.experts.3.up_proj",
        "layer.0.shared.0.down_proj",
        "layer.1.ffn_norm",
        "final_norm",
        "lm_head",
    ):
        assert expected in names


def test_norms_and_embedding_skip_weight_decay(tiny_model):
    decayed = {p.name for p in tiny_model.parameters() if p.weight_decay}
    assert "embed" not in decayed
    assert "layer.0.attn_norm" not in decayed
    assert "layer.0.attn.q_proj" in decayed


def test_tiny_model_gradients_match_finite_differences(tiny_model):
    ids = np.random.default_rng(2).integers(0, 17, size=(1, 6))
    targets = np.random.default_rng(3).integers(0, 17, size=6)
    with Tape() as tape:
        logits, _ = model_forward(tiny_model, ids)
        loss = cross_entropy(logits, targets)
    backward(tape, loss)

    rng = np.random.default_rng(4)
    params = [tiny_model.lm_head, tiny_model.blocks[0].attention.q_proj, tiny_model.blocks[1].ffn_norm]
    for param in params:
        flat = param.data.reshape(-1)
        index = int(rng.integers(flat.size))
        original = flat[index]
        flat[index] = original + 1e-5
        upper = cross_entropy(model_forward(tiny_model, ids)[0], targets).item()
        flat[index] = original - 1e-5
        lower = cross_entropy(model_forward(tiny_model, ids)[0], targets).item()
        flat[index] = original
        numeric = (upper - lower) / 2e-5
        analytic = float(param.grad.reshape(-1)[index])
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-8) + 1e-9


def test_expert_parameter_count():
    assert expert_parameter_count(4, 8) == 96


def test_router_count_per_iteration():
    config = ModelConfig.model_validate(
        {
            "num_layers": 1,
            "hidden_size": 16,
            "num_heads": 2,
            "coe": {"num_experts": 8, "total_k": 4, "num_iterations": 2},
        }
    )
    assert param_count(config).routers == 256


def test_full_scale_counts():
    counts = param_count(ModelConfig.full_scale())
    assert counts.routed_experts == 63 * 4 * 3 * 1024 * 704 == 544_997_376
    assert counts.shared_experts == 8_650_752
    assert 553_000_000 < counts.routed_experts + counts.shared_experts < 554_000_000


@pytest.mark.parametrize(
    "coe",
    [
        {"num_experts": 4, "total_k": 2, "num_iterations": 2},
        {"num_experts": 4, "total_k": 2, "num_iterations": 2, "gating_mode": "shared"},
        {"num_experts": 6, "num_shared_experts": 0, "total_k": 3, "num_iterations": 1},
        {"num_experts": 8, "num_shared_experts": 2, "total_k": 8, "num_iterations": 4},
    ],
)
def test_param_count_matches_registry(coe):
    config = tiny_config(coe={**coe, "intermediate_size": 16})
    model = CoEModel.init(config)
    assert count_registered_parameters(model) == param_count(config).total


def test_modes_change_only_router_count():
    base = param_count(tiny_config()).as_dict()
    shared = param_count(
        tiny_config(coe={"num_experts": 4, "total_k": 2, "num_iterations": 2, "intermediate_size": 16, "gating_mode": "shared", "residual_mode": "outer"})
    ).as_dict()
    changed = {key for key in base if base[key] != shared[key]}
    assert changed == {"routers", "non_embedding", "total"}


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        tiny_config(num_heads=5)
    with pytest.raises(ValueError):
        tiny_config(coe={"num_experts": 4, "total_k": 3, "num_iterations": 2})
    with pytest.raises(ValueError):
        tiny_config(coe={"num_experts": 2, "total_k": 6, "num_iterations": 2})
    with pytest.raises(ValueError):
        tiny_config(unknown_field=1)


def test_duplicate_parameter_names_rejected(tiny_model):
    blocks = [tiny_model.blocks[0], tiny_model.blocks[0]]
    with pytest.raises(ConfigurationError):
        CoEModel(tiny_model.config, tiny_model.embed, blocks, tiny_model.final_norm, tiny_model.lm_head)
