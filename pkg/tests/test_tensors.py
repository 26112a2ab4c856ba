import math

import numpy as np
import pytest

from coelab.config.errors import DimensionError, NumericError, UsageError
from coelab.tensors import (
    Tape,
    Tensor,
    add,
    apply_op,
    backward,
    bmm,
    causal_mask,
    cross_entropy,
    finite_diff_check,
    matmul,
    mul,
    no_grad,
    reshape,
    rmsnorm,
    rotary,
    scale,
    scale_rows,
    scatter_rows,
    silu,
    softmax_rows,
    sub,
    sum_all,
    take_rows,
    transpose,
    zero_grads,
)

SEEDS = range(10)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_dot_product():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_of_sum():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]])
    with Tape() as tape:
        out = sum_all(matmul(a, b))
    backward(tape, out)
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]])
    assert finite_diff_check(lambda t: sum_all(matmul(t, b)), a) < 1e-9


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(e.value)


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax_rows(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_known_values():
    probs = softmax_rows(Tensor([2.0, 1.0, 0.0, -1.0])).data
    np.testing.assert_allclose(probs, [0.6439, 0.2369, 0.0871, 0.0321], atol=1e-4)


def test_softmax_large_input_does_not_overflow():
    probs = softmax_rows(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(probs))
    assert probs[0] == pytest.approx(1.0)
    assert probs[1] == pytest.approx(0.0, abs=1e-300)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    probs = softmax_rows(Tensor(rng.uniform(-50, 50, size=(6, 9)))).data
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax_rows(Tensor([0.0, np.nan]))


def test_elementwise_values():
    np.testing.assert_array_equal(add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    np.testing.assert_array_equal(sub(Tensor([1.0, 2.0]), 1.0).data, [0.0, 1.0])
    np.testing.assert_array_equal(scale(Tensor([1.0, -2.0]), 3.0).data, [3.0, -6.0])
    assert silu(Tensor(0.0)).item() == 0.0


def test_elementwise_rejects_incompatible_shapes():
    with pytest.raises(DimensionError):
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        mul(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_silu_derivative_at_one():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        out = sum_all(silu(x))
    backward(tape, out)
    assert x.grad[0] == pytest.approx(0.9277, abs=1e-3)


def test_rmsnorm_known_values():
    out = rmsnorm(Tensor([3.0, 4.0]), Tensor([1.0, 1.0]), eps=0.0).data
    np.testing.assert_allclose(out, [0.8485, 1.1314], atol=1e-4)


def test_rmsnorm_constant_row_is_ones():
    out = rmsnorm(Tensor(np.full(5, 2.5)), Tensor(np.ones(5)), eps=0.0).data
    np.testing.assert_allclose(out, np.ones(5))


def test_rmsnorm_rejects_negative_eps():
    with pytest.raises(UsageError):
        rmsnorm(Tensor([1.0]), Tensor([1.0]), eps=-1.0)


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((3, 256))), np.array([0, 17, 255]))
    assert loss.item() == pytest.approx(math.log(256))


def test_cross_entropy_confident_prediction():
    loss = cross_entropy(Tensor([[10.0, -10.0]]), np.array([0]))
    assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_two_classes():
    assert cross_entropy(Tensor([[0.0, 0.0]]), np.array([1])).item() == pytest.approx(0.6931, abs=1e-4)


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))


def test_cross_entropy_ignore_index_excludes_tokens():
    logits = Tensor([[0.0, 0.0], [10.0, -10.0]])
    loss = cross_entropy(logits, np.array([-1, 0]), ignore_index=-1)
    assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)
    with pytest.raises(UsageError):
        cross_entropy(logits, np.array([-1, -1]), ignore_index=-1)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        out = sum_all(mul(x, x))
    backward(tape, out)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_until_reset():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        out = sum_all(mul(x, x))
    backward(tape, out)
    backward(tape, out)
    np.testing.assert_allclose(x.grad, [4.0, 8.0, 12.0])
    zero_grads([x])
    assert x.grad is None


def test_backward_single_token_cross_entropy():
    logits = Tensor(np.random.default_rng(3).normal(size=(1, 5)), requires_grad=True)
    error = finite_diff_check(lambda t: cross_entropy(t, np.array([2])), logits)
    assert error < 1e-4


def test_backward_rejects_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = mul(x, x)
    with pytest.raises(UsageError):
        backward(tape, out)


def test_backward_rejects_root_from_another_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        out = sum_all(mul(x, x))
    with pytest.raises(UsageError):
        backward(Tape(), out)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            mul(x, x)
    assert len(tape) == 0


def test_tape_records_in_topological_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        sum_all(silu(mul(x, x)))
    for earlier, later in zip(tape.records, tape.records[1:]):
        assert earlier.output.node < later.output.node
    for record in tape.records:
        assert all(operand.node < record.output.node for operand in record.inputs)


def test_finite_diff_check_sum_of_squares():
    x = Tensor(np.random.default_rng(0).normal(size=7))
    assert finite_diff_check(lambda t: sum_all(mul(t, t)), x, h=1e-5) < 1e-9


def test_finite_diff_check_detects_wrong_gradient():
    def doubled_square(t: Tensor) -> Tensor:
        return apply_op(t.data * t.data, (t,), lambda g: (4.0 * t.data * g,), "wrong_square")

    x = Tensor(np.random.default_rng(0).normal(size=4))
    assert finite_diff_check(lambda t: sum_all(doubled_square(t)), x) > 1e-2


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(UsageError):
        finite_diff_check(lambda t: sum_all(t), Tensor([1.0]), h=0.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_operation_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 6)))
    w = rng.normal(size=(4, 6))
    other = Tensor(rng.normal(size=(6, 3)))
    norm_weight = Tensor(rng.uniform(0.5, 1.5, size=6))
    rows = np.array([2, 0, 2, 3])
    half = 3
    cos, sin = np.cos(rng.normal(size=(4, half))), np.sin(rng.normal(size=(4, half)))

    cases = {
        "silu": lambda t: weighted_sum(silu(t), w),
        "mul": lambda t: weighted_sum(mul(t, t), w),
        "softmax_rows": lambda t: weighted_sum(softmax_rows(t), w),
        "rmsnorm": lambda t: weighted_sum(rmsnorm(t, norm_weight, 1e-6), w),
        "matmul": lambda t: sum_all(mul(matmul(t, other), Tensor(rng_like(seed, (4, 3))))),
        "transpose": lambda t: weighted_sum(transpose(transpose(t, (1, 0)), (1, 0)), w),
        "reshape": lambda t: weighted_sum(reshape(reshape(t, (3, 8)), (4, 6)), w),
        "take_rows": lambda t: weighted_sum(take_rows(t, rows), w),
        "scatter_rows": lambda t: sum_all(mul(scatter_rows(t, np.array([4, 1, 0, 2]), 5), Tensor(rng_like(seed, (5, 6))))),
        "rotary": lambda t: weighted_sum(rotary(t, cos, sin), w),
        "cross_entropy": lambda t: cross_entropy(t, np.array([0, 5, 3, 1])),
    }
    for name, f in cases.items():
        error = finite_diff_check(f, Tensor(x.data.copy()))
        assert error < 1e-4, name


@pytest.mark.parametrize("seed", SEEDS)
def test_batched_and_masked_gradients(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3, 4)))
    b = Tensor(rng.normal(size=(2, 4, 3)))
    w = rng.normal(size=(2, 3, 3))
    assert finite_diff_check(lambda t: weighted_sum(bmm(t, b), w), a) < 1e-4
    assert finite_diff_check(lambda t: weighted_sum(bmm(a, t), w), b) < 1e-4

    scores = Tensor(rng.normal(size=(2, 3, 3)))
    assert finite_diff_check(lambda t: weighted_sum(softmax_rows(causal_mask(t)), w), scores) < 1e-4

    x = Tensor(rng.normal(size=(5, 3)))
    row_weights = Tensor(rng.normal(size=5))
    w_rows = rng.normal(size=(5, 3))
    assert finite_diff_check(lambda t: weighted_sum(scale_rows(t, row_weights), w_rows), x) < 1e-4
    assert finite_diff_check(lambda t: weighted_sum(scale_rows(x, t), w_rows), row_weights) < 1e-4

    norm_x = Tensor(rng.normal(size=(3, 4)))
    norm_w = rng.normal(size=(3, 4))
    weight = Tensor(rng.uniform(0.5, 1.5, size=4))
    assert finite_diff_check(lambda t: weighted_sum(rmsnorm(norm_x, t, 1e-6), norm_w), weight) < 1e-4


def rng_like(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.random.default_rng(seed + 1000).normal(size=shape)


def test_causal_mask_blocks_future():
    masked = causal_mask(Tensor(np.zeros((1, 3, 3)))).data[0]
    assert np.isneginf(masked[0, 1]) and np.isneginf(masked[0, 2]) and np.isneginf(masked[1, 2])
    assert masked[2, 0] == 0.0


def test_item_requires_scalar():
    with pytest.raises(UsageError):
        Tensor([1.0, 2.0]).item()
