import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltx import tensor as T
from ltx.core import mask_blend
from ltx.tensor import ContractError, ShapeError, Tensor

SEEDS = range(5)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def away_from(rng, shape, point=0.0, gap=0.1):
    """Random values kept ``gap`` away from a kink at ``point``."""
    v = rng.uniform(-1, 1, shape)
    return np.where(np.abs(v - point) < gap, point + gap * np.sign(v - point + 1e-12), v)


def scalarize(t, rng_weights):
    return T.sum(T.mul(t, rng_weights))


# each case builds (loss_fn, params) from a seeded generator
def _case_ewise(kind):
    def build(rng):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
        w = rng.normal(size=(3, 4))
        return (lambda: scalarize(T.ewise(kind, a, b), w)), [a, b]
    return build


def _case_scalar_mul(rng):
    a, s = leaf(rng.normal(size=(2, 5))), leaf(rng.normal())
    w = rng.normal(size=(2, 5))
    return (lambda: scalarize(T.ewise("mul", a, s), w)), [a, s]


def _case_bias_add(rng):
    a, b = leaf(rng.normal(size=(4, 3, 5))), leaf(rng.normal(size=(5,)))
    w = rng.normal(size=(4, 3, 5))
    return (lambda: scalarize(T.add(a, b), w)), [a, b]


def _case_unary(fn, make):
    def build(rng):
        x = leaf(make(rng))
        w = rng.normal(size=x.dims)
        return (lambda: scalarize(fn(x), w)), [x]
    return build


def _case_matmul(shape_a, shape_b):
    def build(rng):
        a, b = leaf(rng.normal(size=shape_a)), leaf(rng.normal(size=shape_b))
        out_shape = (a.data @ b.data).shape
        w = rng.normal(size=out_shape)
        return (lambda: scalarize(T.matmul(a, b), w)), [a, b]
    return build


def _case_layer_norm(rng):
    x, g, b = leaf(rng.normal(size=(3, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    return (lambda: scalarize(T.layer_norm(x, g, b), w)), [x, g, b]


def _case_softmax(rng):
    x = leaf(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    return (lambda: scalarize(T.softmax_rows(x), w)), [x]


def _case_shapes(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    y = leaf(rng.normal(size=(2, 1, 4)))
    w = rng.normal(size=(4, 2, 2))

    def f():
        c = T.concat([x, y], axis=1)                   # 2,4,4
        t = T.transpose(T.reshape(c, (2, 4, 2, 2)), (1, 0, 2, 3))
        return scalarize(T.take(t, (slice(None), 1)), w)
    return f, [x, y]


def _case_broadcast_sum_mean(rng):
    x = leaf(rng.normal(size=(1, 3)))
    w = rng.normal(size=(4, 3))

    def f():
        b = T.broadcast_to(x, (4, 3))
        return T.add(T.sum(T.mul(b, w), axis=0)[0], T.mean(T.square(b)))
    return f, [x]


def _case_conv(per_instance):
    def build(rng):
        x = leaf(rng.normal(size=(2, 2, 5, 5)))
        if per_instance:
            k, b = leaf(rng.normal(size=(2, 3, 2, 3, 3))), leaf(rng.normal(size=(2, 3)))
        else:
            k, b = leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
        w = rng.normal(size=(2, 3, 3, 3))
        return (lambda: scalarize(T.conv2d(x, k, b), w)), [x, k, b]
    return build


def _case_maxpool(rng):
    # distinct values with clear gaps so the argmax is stable under +-h
    x = leaf(rng.permutation(32).reshape(2, 4, 4) * 0.1 + rng.uniform(0, 0.01, (2, 4, 4)))
    w = rng.normal(size=(2, 2, 2))
    return (lambda: scalarize(T.maxpool2(x), w)), [x]


def _case_upsample(rng):
    m = leaf(rng.uniform(size=(2, 3, 4)))
    w = rng.normal(size=(2, 7, 9))
    return (lambda: scalarize(T.bilinear_upsample(m, 7, 9), w)), [m]


def _case_mask_blend(rng):
    x, m, z = leaf(rng.uniform(size=(2, 3, 4, 4))), leaf(rng.uniform(size=(2, 4, 4))), leaf(0.3)
    w = rng.normal(size=(2, 3, 4, 4))
    return (lambda: scalarize(mask_blend(x, m, z), w)), [x, m, z]


def _case_mask_blend_per_instance(rng):
    x, m, z = leaf(rng.uniform(size=(3, 1, 4, 4))), leaf(rng.uniform(size=(3, 4, 4))), leaf(rng.uniform(size=3))
    w = rng.normal(size=(3, 1, 4, 4))
    return (lambda: scalarize(mask_blend(x, m, z), w)), [x, m, z]


GRAD_CASES = {
    "add": _case_ewise("add"),
    "sub": _case_ewise("sub"),
    "mul": _case_ewise("mul"),
    "scalar_mul": _case_scalar_mul,
    "bias_add": _case_bias_add,
    "square": _case_unary(T.square, lambda r: r.normal(size=(3, 3))),
    "abs": _case_unary(T.absolute, lambda r: away_from(r, (3, 3))),
    "log": _case_unary(T.log, lambda r: r.uniform(0.5, 2.0, (3, 3))),
    "clamp": _case_unary(lambda x: T.clamp(x, -0.5, 0.5), lambda r: away_from(r, (4, 4), 0.5)),
    "relu": _case_unary(T.relu, lambda r: away_from(r, (3, 4))),
    "tanh": _case_unary(T.tanh, lambda r: r.normal(size=(3, 4))),
    "sigmoid": _case_unary(T.sigmoid, lambda r: 3 * r.normal(size=(3, 4))),
    "softmax": _case_softmax,
    "matmul_2d": _case_matmul((3, 4), (4, 2)),
    "matmul_shared": _case_matmul((2, 3, 4), (4, 2)),
    "matmul_batched": _case_matmul((2, 3, 4), (2, 4, 5)),
    "layer_norm": _case_layer_norm,
    "shape_ops": _case_shapes,
    "broadcast_sum_mean": _case_broadcast_sum_mean,
    "conv2d": _case_conv(False),
    "conv2d_per_instance": _case_conv(True),
    "maxpool2": _case_maxpool,
    "upsample": _case_upsample,
    "mask_blend": _case_mask_blend,
    "mask_blend_per_instance_z": _case_mask_blend_per_instance,
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_central_differences(name, seed):
    f, params = GRAD_CASES[name](np.random.default_rng(seed))
    assert T.grad_check(f, params, h=1e-5) < 1e-4


# ---------------------------------------------------------------- ewise

def test_ewise_examples():
    assert T.ewise("mul", [1.0, 2.0], [3.0, 4.0]).data.tolist() == [3.0, 8.0]
    x = np.array([1.5, -2.0])
    assert np.array_equal(T.ewise("add", x, 0.0).data, x)
    assert T.ewise("sub", [5.0], [5.0]).data.tolist() == [0.0]


def test_ewise_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        T.ewise("add", np.ones((2, 3)), np.ones(3))
    with pytest.raises(ShapeError):
        T.ewise("mul", np.ones(2), np.ones(3))
    with pytest.raises(ValueError):
        T.ewise("div", 1.0, 2.0)


def test_bias_helpers_broadcast_but_reject_incompatible():
    assert T.add(np.ones((2, 3)), np.arange(3.0)).data.tolist() == [[1, 2, 3], [1, 2, 3]]
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 3)), np.ones(2))


# ---------------------------------------------------------------- matmul

def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(np.eye(2), m).data, m)
    assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]
    a, b = leaf([[1.0, 1.0]]), Tensor([[2.0], [5.0]])
    T.backward(T.sum(T.matmul(a, b)))
    assert np.allclose(a.grad, [[2.0, 5.0]], atol=1e-12)
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------- conv / pool

def test_conv2d_examples():
    x = np.random.default_rng(0).normal(size=(1, 4, 4))
    ident = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(ident.data, x)
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.data.tolist() == [[[4.0, 4.0], [4.0, 4.0]]]
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


def test_conv2d_kernel_gradient_single_entry():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(1, 4, 4)))
    k, b = leaf(rng.normal(size=(2, 1, 3, 3))), leaf(np.zeros(2))
    assert T.grad_check(lambda: T.sum(T.conv2d(x, k, b)), [k]) < 1e-6


def test_maxpool_examples_and_tie_rule():
    assert T.maxpool2(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [[[4.0]]]
    x = leaf(np.full((1, 4, 4), 2.5))
    out = T.maxpool2(x)
    assert np.all(out.data == 2.5)
    T.backward(T.sum(out))
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1.0
    assert np.array_equal(x.grad[0], expected)
    with pytest.raises(ShapeError):
        T.maxpool2(Tensor(np.ones((1, 3, 4))))


def test_maxpool_gradcheck_random_4x4():
    rng = np.random.default_rng(9)
    x = leaf(rng.permutation(16).reshape(1, 4, 4) + 0.0)
    w = rng.normal(size=(1, 2, 2))
    assert T.grad_check(lambda: T.sum(T.mul(T.maxpool2(x), w)), [x]) < 1e-6


# ---------------------------------------------------------------- activations

def test_activation_examples():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.relu(Tensor([-3.0, 3.0])).data.tolist() == [0.0, 3.0]
    x = leaf(0.0)
    T.backward(T.tanh(x))
    assert x.grad == 1.0
    with pytest.raises(ValueError):
        T.activation("gelu", Tensor(1.0))


def test_sigmoid_strictly_inside_unit_interval_for_moderate_inputs():
    s = T.sigmoid(Tensor(np.linspace(-30, 30, 101))).data
    assert np.all((s > 0) & (s < 1))
    # no overflow warnings at the extremes
    with np.errstate(over="raise"):
        ext = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert ext.tolist() == [0.0, 1.0]


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    assert T.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]
    p = T.softmax_rows(Tensor([[2.0, 1.0]])).data[0]
    e = math.e
    assert p[0] == pytest.approx(e / (e + 1), abs=1e-15)
    assert p[1] == pytest.approx(1 / (e + 1), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(row, c):
    v = np.array([row])
    p = T.softmax_rows(Tensor(v)).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0) or np.ptp(v) > 30
    assert np.allclose(T.softmax_rows(Tensor(v + c)).data, p, rtol=0, atol=1e-12)


def test_softmax_large_logits_stay_finite():
    p = T.softmax_rows(Tensor([[1000.0, 0.0, -1000.0]])).data
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0


# ---------------------------------------------------------------- backward

def test_backward_examples():
    w = leaf(3.0)
    T.backward(T.square(w))
    assert w.grad == 6.0
    u, v = leaf(1.0), leaf(2.0)
    T.backward(T.mul(u, 4.0), leaves=[u, v])
    assert u.grad == 4.0 and v.grad == 0.0
    with pytest.raises(ContractError):
        T.backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_record_is_topological_and_visits_each_node_once():
    x = leaf([1.0, 2.0])
    a = T.mul(x, x)
    b = T.add(a, x)
    loss = T.sum(T.mul(b, a))
    rec = T.ComputationRecord.trace(loss)
    pos = {id(n): i for i, n in enumerate(rec.nodes)}
    assert len(pos) == len(rec.nodes)
    for node in rec.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_replaying_record_gives_bitwise_identical_gradients():
    rng = np.random.default_rng(1)
    x, w = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(3, 2)))
    loss = T.sum(T.tanh(T.matmul(x, w)))
    rec = T.backward(loss)
    first = (x.grad.copy(), w.grad.copy())
    x.grad = w.grad = None
    T.backward(loss, rec)
    assert np.array_equal(first[0], x.grad) and np.array_equal(first[1], w.grad)


def test_no_grad_records_nothing():
    x = leaf(2.0)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_gradients_accumulate_across_backward_calls():
    x = leaf(1.5)
    T.backward(T.mul(x, 2.0))
    T.backward(T.mul(x, 3.0))
    assert x.grad == 5.0


# ---------------------------------------------------------------- grad_check

def test_grad_check_examples():
    w = leaf(2.0)
    assert T.grad_check(lambda: T.mul(T.square(w), w), [w], h=1e-5) < 1e-8
    c = leaf([1.0, 2.0])
    assert T.grad_check(lambda: Tensor(7.0), [c]) == 0.0
    with pytest.raises(ContractError):
        T.grad_check(lambda: T.sum(c), [c], h=0.0)


def test_grad_check_detects_a_wrong_backward():
    x = leaf([0.3, -0.7])
    bad = lambda: T.sum(T._node(x.data ** 2, (x,), lambda g: (g,), "bad"))  # noqa: E731
    assert T.grad_check(bad, [x]) > 0.1


# ---------------------------------------------------------------- Adam

def test_adam_first_step_moves_by_learning_rate():
    p = leaf(np.zeros(3))
    state = T.AdamState.zeros_like([p], lr=0.002)
    T.adam_step([p], [np.ones(3)], state)
    assert np.allclose(p.data, -0.002 / (1 + 1e-8 / 1.0), rtol=0, atol=1e-15)
    assert state.t == 1


def test_adam_zero_gradient_is_identity():
    p = leaf([1.0, -2.0])
    before = p.data.copy()
    state = T.AdamState.zeros_like([p])
    for _ in range(3):
        T.adam_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.data, before) and state.t == 3


def test_adam_two_steps_match_scalar_oracle():
    p = leaf(0.7)
    state = T.AdamState.zeros_like([p], lr=0.01)
    g = 0.35
    # scalar reference
    theta, m, v = 0.7, 0.0, 0.0
    for t in (1, 2):
        T.adam_step([p], [np.array(g)], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p.data - theta) < 1e-12


def test_adam_shape_mismatch():
    p = leaf(np.zeros(2))
    with pytest.raises(ShapeError):
        T.adam_step([p], [np.zeros(3)], T.AdamState.zeros_like([p]))


def test_adam_wrapper_uses_accumulated_grads():
    p = leaf([1.0])
    opt = T.Adam([p], lr=0.1)
    T.backward(T.sum(T.mul(p, 2.0)))
    opt.step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-9)
    opt.zero_grad()
    assert p.grad is None


# ---------------------------------------------------------------- upsample

def test_upsample_examples():
    const = T.bilinear_upsample(Tensor(np.full((3, 3), 0.37)), 11, 11).data
    assert np.all(const == 0.37)
    one = T.bilinear_upsample(Tensor([[0.25]]), 4, 5).data
    assert one.shape == (4, 5) and np.all(one == 0.25)
    out = T.bilinear_upsample(Tensor([[0.0, 1.0], [0.0, 1.0]]), 4, 4).data
    for row in out:
        assert np.allclose(row, [0, 1 / 3, 2 / 3, 1], rtol=0, atol=1e-15)
    with pytest.raises(ContractError):
        T.bilinear_upsample(Tensor(np.ones((4, 4))), 2, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 6), st.integers(0, 2**31))
def test_upsample_output_within_input_range(h, w, extra, seed):
    m = np.random.default_rng(seed).uniform(size=(h, w))
    out = T.bilinear_upsample(Tensor(m), h + extra, w + extra).data
    assert out.min() >= m.min() - 1e-15 and out.max() <= m.max() + 1e-15
    # corners align with the source corners
    assert out[0, 0] == m[0, 0] and out[-1, -1] == m[-1, -1]


def test_glorot_bound():
    assert T.glorot_bound(3, 5) == math.sqrt(6 / 8)
