import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sherl import autograph as ag
from sherl.errors import ContractError, DimensionError, NumericError

from helpers import numeric_grad, rel_error


def _check_op(build, arrays, tol=1e-6):
    """Compare backprop with central differences for ``sum(build(*tensors) * probe)``."""
    tensors = [ag.parameter(a) for a in arrays]
    with ag.Tape():
        probe_shape = build(*tensors).shape
    probe = np.random.default_rng(0).normal(size=probe_shape)

    def value():
        with ag.paused():
            return float(np.sum(build(*tensors).data * probe))

    with ag.Tape() as tape:
        loss = ag.sum(ag.mul(build(*tensors), ag.constant(probe)))
    grads = ag.backward(tape, loss)
    numeric = numeric_grad(value, [t.data for t in tensors])
    for t, n in zip(tensors, numeric):
        assert rel_error(grads.get(t, np.zeros_like(t.data)), n) < tol


R = np.random.default_rng(42)

OPS = {
    "matmul": (lambda a, b: ag.matmul(a, b), [R.normal(size=(3, 4)), R.normal(size=(4, 2))]),
    "matmul_batched": (lambda a, b: ag.matmul(a, b), [R.normal(size=(2, 3, 4)), R.normal(size=(4, 2))]),
    "matmul_both_batched": (lambda a, b: ag.matmul(a, b), [R.normal(size=(2, 3, 4)), R.normal(size=(2, 4, 5))]),
    "add": (lambda a, b: ag.add(a, b), [R.normal(size=(3, 2)), R.normal(size=(3, 2))]),
    "sub_scalar": (lambda a, b: ag.sub(a, b), [R.normal(size=(3, 2)), R.normal(size=())]),
    "mul": (lambda a, b: ag.mul(a, b), [R.normal(size=(3, 2)), R.normal(size=(3, 2))]),
    "div": (lambda a, b: ag.div(a, b), [R.normal(size=(4,)), R.uniform(0.5, 2, size=(4,))]),
    "add_bias": (lambda a, b: ag.add_bias(a, b), [R.normal(size=(2, 3, 4)), R.normal(size=(4,))]),
    "relu": (lambda a: ag.relu(a), [R.normal(size=(5,)) + np.sign(R.normal(size=5)) * 0.1]),
    "sigmoid": (lambda a: ag.sigmoid(a), [R.normal(size=(3, 3))]),
    "tanh": (lambda a: ag.tanh(a), [R.normal(size=(3, 3))]),
    "sum_axis": (lambda a: ag.sum(a, axis=1), [R.normal(size=(3, 4))]),
    "mean": (lambda a: ag.mean(a, axis=0), [R.normal(size=(3, 4))]),
    "amax": (lambda a: ag.amax(a, axis=-2), [R.normal(size=(2, 4, 3))]),
    "reshape": (lambda a: ag.reshape(a, (6, 2)), [R.normal(size=(3, 4))]),
    "transpose": (lambda a: ag.transpose(a, (1, 0, 2)), [R.normal(size=(2, 3, 4))]),
    "swap_last": (lambda a: ag.swap_last(a), [R.normal(size=(2, 3, 4))]),
    "expand": (lambda a: ag.expand(a, (3, 4)), [R.normal(size=(4,))]),
    "stack": (lambda a, b: ag.stack([a, b], axis=-2), [R.normal(size=(3, 2)), R.normal(size=(3, 2))]),
    "concat": (lambda a, b: ag.concat([a, b], axis=0), [R.normal(size=(3, 2)), R.normal(size=(1, 2))]),
    "getitem": (lambda a: ag.getitem(a, (Ellipsis, 1, slice(None))), [R.normal(size=(2, 3, 4))]),
    "l2_rows": (lambda a: ag.l2_rows(a), [R.normal(size=(3, 4))]),
    "l1_vector": (lambda a: ag.l1_vector(a), [R.normal(size=(3, 4))]),
    "softmax": (lambda a: ag.softmax(a, axis=-1), [R.normal(size=(3, 4))]),
    "layer_norm": (lambda a, g, b: ag.layer_norm(a, g, b), [R.normal(size=(3, 5)), R.normal(size=5), R.normal(size=5)]),
    "cross_entropy": (lambda a: ag.cross_entropy(a, np.array([0, 2, 1])), [R.normal(size=(3, 4))]),
    "conv2d": (lambda x, w, b: ag.conv2d(x, w, b), [R.normal(size=(1, 2, 5, 5)), R.normal(size=(3, 2, 3, 3)), R.normal(size=3)]),
    "conv2d_stride": (lambda x, w, b: ag.conv2d(x, w, b, stride=2), [R.normal(size=(2, 2, 6, 6)), R.normal(size=(2, 2, 3, 3)), R.normal(size=2)]),
    "pool_avg": (lambda x: ag.pooling("avg", x, (2, 2)), [R.normal(size=(2, 5, 5))]),
    "pool_max": (lambda x: ag.pooling("max", x, (2, 3)), [R.normal(size=(1, 2, 4, 6))]),
    "pool_adaptive": (lambda x: ag.pooling("adaptive_avg", x, (3, 3)), [R.normal(size=(2, 7, 5))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, arrays = OPS[name]
    _check_op(build, [a.copy() for a in arrays])


def test_nothing_recorded_without_trainable_inputs():
    with ag.Tape() as tape:
        out = ag.relu(ag.matmul(ag.constant(np.ones((2, 2))), ag.constant(np.ones((2, 2)))))
    assert tape.nodes == [] and not out.requires_grad and tape.retained_bytes == 0


def test_paused_suppresses_recording():
    w = ag.parameter(np.ones((2, 2)))
    with ag.Tape() as tape:
        with ag.paused():
            out = ag.matmul(w, w)
    assert tape.nodes == [] and not out.requires_grad


def test_origin_outside_tape_is_noop():
    with ag.origin("anything"):
        assert ag.active_tape() is None


def test_retained_buffers_deduplicated_and_params_excluded():
    w = ag.parameter(np.ones((4, 4)))
    x = ag.parameter(np.ones((3, 4)), trainable=True)
    x.is_param = False
    with ag.Tape() as tape:
        with tape.origin("a"):
            y = ag.matmul(x, w)   # saves w (param, skipped) and x
            z = ag.matmul(x, w)   # same buffers again
    assert tape.retained_bytes_by_origin == {"a": x.data.nbytes}
    assert tape.nodes_by_origin() == {"a": 2}
    assert y.node_id == 0 and z.node_id == 1


def test_backward_accumulates_shared_inputs():
    a = ag.parameter(np.array([1.0, 2.0]))
    with ag.Tape() as tape:
        loss = ag.sum(ag.add(ag.mul(a, a), a))
    g = ag.backward(tape, loss)[a]
    np.testing.assert_allclose(g, 2 * a.data + 1)


def test_backward_contract():
    a = ag.parameter(np.ones(3))
    tape = ag.Tape()
    with tape:
        vec = ag.mul(a, a)
        loss = ag.sum(vec)
    with pytest.raises(ContractError):
        ag.backward(tape, vec)
    assert ag.backward(tape, ag.constant(1.0)) == {}
    other = ag.Tape()
    with pytest.raises(ContractError):
        ag.backward(other, loss)


def test_backward_needs_finalized_tape():
    a = ag.parameter(np.ones(3))
    tape = ag.Tape()
    with tape:
        loss = ag.sum(ag.mul(a, a))
        with pytest.raises(ContractError):
            ag.backward(tape, loss)


def test_backward_reports_requested_intermediates():
    a = ag.parameter(np.array([1.0, -2.0, 3.0]))
    with ag.Tape() as tape:
        mid = ag.scale(a, 2.0)
        loss = ag.sum(ag.mul(mid, mid))
    grads = ag.backward(tape, loss, wrt=[mid])
    np.testing.assert_allclose(grads[mid], 2 * mid.data)
    np.testing.assert_allclose(grads[a], 4 * mid.data)


def test_replay_reproduces_and_substitutes():
    w = ag.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    x = ag.constant(np.array([[1.0, 1.0]]))
    with ag.Tape() as tape:
        out = ag.tanh(ag.matmul(x, w))
    np.testing.assert_array_equal(ag.replay(tape)[-1], out.data)
    fed = ag.replay(tape, {w: np.zeros((2, 2))})
    np.testing.assert_array_equal(fed[-1], np.zeros((1, 2)))


def test_shape_errors():
    with pytest.raises(DimensionError):
        ag.matmul(ag.constant(np.ones((2, 3))), ag.constant(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ag.add(ag.constant(np.ones((2, 3))), ag.constant(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        ag.pooling("avg", ag.constant(np.ones((1, 2, 2))), (3, 3))
    with pytest.raises(ContractError):
        ag.normalize("l3", ag.constant(np.ones(3)))


def test_zero_rows_normalize_to_zero():
    x = ag.parameter(np.zeros((2, 3)))
    with ag.Tape() as tape:
        out = ag.l2_rows(x)
        loss = ag.sum(ag.add(out, ag.l1_vector(x)))
    assert np.all(out.data == 0)
    assert np.all(ag.backward(tape, loss)[x] == 0)


def test_grad_check_detects_wrong_gradient():
    w = ag.parameter(np.array([0.3, -0.7]))

    def good():
        return ag.sum(ag.mul(w, w))

    assert ag.grad_check(good, [w]) < 1e-8
    # a forward that silently ignores the tape makes analytic and numeric disagree
    def broken():
        with ag.paused():
            frozen = ag.mul(w, w)
        return ag.sum(ag.add(frozen, w))

    assert ag.grad_check(broken, [w]) > 0.1


def test_grad_check_rejects_non_finite():
    w = ag.parameter(np.array([1.0]))
    with pytest.raises(NumericError):
        ag.grad_check(lambda: ag.sum(ag.scale(w, np.inf)), [w])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, max_side=5),
                  elements=st.floats(-10, 10)))
def test_l2_rows_unit_or_zero(x):
    out = ag.l2_rows(ag.constant(x)).data
    norms = np.linalg.norm(out, axis=-1)
    zero = np.linalg.norm(x, axis=-1) < ag.NORM_EPS
    assert np.all(np.abs(norms[~zero] - 1) < 1e-9) and np.all(norms[zero] == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_matmul_matches_numpy(m, k, n, batch):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a, b = rng.normal(size=(batch, m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(ag.matmul(ag.constant(a), ag.constant(b)).data, a @ b)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 4), st.integers(1, 4))
def test_adaptive_pooling_preserves_mean_when_divisible(h, w, th, tw):
    if h % th or w % tw:
        return
    x = np.random.default_rng(h * w).normal(size=(2, h, w))
    out = ag.pooling("adaptive_avg", ag.constant(x), (th, tw)).data
    np.testing.assert_allclose(out.mean(axis=(-2, -1)), x.mean(axis=(-2, -1)))
