import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import TOL, check_function, op_cases
from shared_ape.numerics import (DimensionError, Graph, backward, clip_by_global_norm, global_norm, load_checkpoint,
                                 save_checkpoint, sgd_step)


def test_softmax_uniform():
    g = Graph()
    out = g.softmax(g.constant(np.zeros(3)))
    np.testing.assert_allclose(out.value, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_softmax_known_values():
    # direct exp/sum at 64-bit, frozen
    g = Graph()
    out = g.softmax(g.constant(np.array([1.0, 2.0, 3.0])))
    np.testing.assert_allclose(out.value, [0.09003057317038046, 0.24472847105479764, 0.6652409557748219],
                               rtol=0, atol=1e-15)


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(3, 5))
    g = Graph()
    np.testing.assert_array_equal(g.matmul(g.constant(np.eye(3)), g.constant(x)).value, x)


def test_cross_entropy_certain():
    g = Graph()
    assert float(g.cross_entropy(g.constant(np.array([20.0, 0.0, 0.0])), 0).value) < 1e-8


def test_cross_entropy_masked_rows_do_not_count():
    g = Graph()
    logits = g.constant(np.array([[1.0, 2.0], [3.0, -1.0]]))
    full = float(g.cross_entropy(logits, [0, 1]).value)
    first = float(g.cross_entropy(logits, [0, 1], weights=np.array([1.0, 0.0])).value)
    assert first == pytest.approx(-math.log(math.exp(1) / (math.exp(1) + math.exp(2))), abs=1e-14)
    assert full > first


@pytest.mark.parametrize("op", ["matmul", "add", "concat"])
def test_dimension_errors_name_the_op(op):
    g = Graph()
    a, b = g.constant(np.ones((2, 3))), g.constant(np.ones((4, 5)))
    with pytest.raises(DimensionError, match=op):
        if op == "matmul":
            g.matmul(a, b)
        elif op == "add":
            g.add(a, b)
        else:
            g.concat([a, b], axis=-1)


def test_backward_square():
    g = Graph()
    x = g.leaf(np.array([3.0]))
    grads = backward(g, g.sum(g.mul(x, x)))
    np.testing.assert_array_equal(grads[x.id], [6.0])


def test_backward_constant_loss():
    g = Graph()
    x = g.leaf(np.array([3.0, 1.0]))
    c = g.sum(g.constant(np.array([2.0])))
    grads = backward(g, c)
    assert np.all(grads.get(x.id, np.zeros(2)) == 0)


def test_backward_fan_out_accumulates():
    g = Graph()
    x = g.leaf(np.array([2.0]))
    y = g.add(g.mul(x, x), g.scale(x, 3.0))  # x^2 + 3x
    grads = backward(g, g.sum(y))
    np.testing.assert_allclose(grads[x.id], [7.0])


def test_backward_rejects_non_scalar():
    g = Graph()
    x = g.leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        backward(g, g.tanh(x))


def test_check_finite_mode():
    g = Graph(check_finite=True)
    with pytest.raises(FloatingPointError):
        g.mul(g.constant(np.array([np.inf])), g.constant(np.array([0.0])))


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradient(name):
    inputs, build = op_cases()[name]
    assert check_function(inputs, build) < TOL


def test_every_differentiable_op_is_covered():
    ops = {"matmul", "add", "sub", "mul", "scale", "tanh", "sigmoid", "sum", "concat", "slice", "reshape",
           "transpose", "stack", "embedding", "dropout", "mask_blend", "batched_dot", "weighted_sum", "softmax",
           "log_softmax", "cross_entropy"}
    covered = {name.split("_axis")[0].replace("_masked", "") for name in op_cases()}
    assert ops <= covered


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_normalised_and_monotone(x):
    g = Graph()
    out = g.softmax(g.constant(x)).value
    assert abs(out.sum() - 1.0) <= 1e-6
    assert np.all(out > 0)
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(out[order]) >= -1e-15)


def test_dropout_identity_when_off():
    g = Graph()
    x = g.constant(np.arange(6.0))
    assert g.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert g.dropout(x, 0.5, False) is x


def test_dropout_inverted_scaling_mean():
    g = Graph()
    x = g.constant(np.full(20000, 2.0))
    out = g.dropout(x, 0.3, True, np.random.default_rng(0)).value
    assert abs(out.mean() - 2.0) / 2.0 < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0 / 0.7}


def test_concat_then_slice_is_identity():
    r = np.random.default_rng(3)
    a, b = r.normal(size=(2, 3)), r.normal(size=(2, 4))
    g = Graph()
    joined = g.concat([g.constant(a), g.constant(b)], axis=-1)
    np.testing.assert_array_equal(g.slice(joined, 0, 3).value, a)
    np.testing.assert_array_equal(g.slice(joined, 3, 7).value, b)


def test_masked_softmax_gives_zero_weight():
    g = Graph()
    out = g.softmax(g.constant(np.array([[5.0, 1.0, 2.0]])), mask=np.array([[False, True, True]])).value
    assert out[0, 0] == 0.0
    assert out.sum() == pytest.approx(1.0)


def test_sgd_examples():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([0.5])}, lr=1.0)
    assert p["w"][0] == 0.5
    sgd_step(p, {"w": np.array([0.0])}, lr=1.0)
    assert p["w"][0] == 0.5


def test_sgd_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, lr=1.0)


def test_clipping_scales_by_half():
    grads = {"a": np.array([6.0, 0.0]), "b": np.array([8.0])}  # global norm 10
    assert global_norm(grads.values()) == 10.0
    clipped = clip_by_global_norm(grads, 5.0)
    np.testing.assert_allclose(clipped["a"], [3.0, 0.0])
    np.testing.assert_allclose(clipped["b"], [4.0])
    p = {"a": np.zeros(2), "b": np.zeros(1)}
    sgd_step(p, grads, lr=1.0, clip_norm=5.0)
    np.testing.assert_allclose(p["b"], [-4.0])


def test_clipping_leaves_small_gradients():
    grads = {"a": np.array([0.3, 0.4])}
    np.testing.assert_array_equal(clip_by_global_norm(grads, 5.0)["a"], grads["a"])


def test_checkpoint_round_trip(tmp_path):
    r = np.random.default_rng(0)
    arrays = {"w": r.normal(size=(3, 4)), "b": r.normal(size=4).astype(np.float32),
              "ids": np.arange(5, dtype=np.int64), "empty": np.zeros((0, 3))}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, arrays)
    raw = path.read_bytes()
    assert raw[:8] == b"APECKPT1"
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_is_little_endian_raw(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"x": np.array([1.0, -2.0])})
    raw = path.read_bytes()
    assert raw.endswith(np.array([1.0, -2.0], dtype="<f8").tobytes())


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"x": np.arange(10.0)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
