import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tests import gradcases as G
from tests.oracles import conv2d_naive
from walklearn.tensor_core import autodiff as ad
from walklearn.tensor_core import checkpoint, grad_check


def leaf(tape, name, value):
    return tape.param(name, np.asarray(value, dtype=float))


def test_l2_distance_three_four_five():
    tape = ad.Tape()
    d = ad.l2_distance(tape.constant([[0.0, 0.0]]), tape.constant([[3.0, 4.0]]))
    assert d.data.tolist() == [5.0]


def test_relu_values():
    tape = ad.Tape()
    assert ad.relu(tape.constant([-2.0, 0.0, 3.0])).data.tolist() == [0.0, 0.0, 3.0]


def test_conv2d_ramp_with_averaging_kernel_matches_direct_sum():
    x = np.arange(25, dtype=float).reshape(1, 5, 5, 1)
    K = np.full((3, 3, 1, 1), 1.0 / 9.0)
    tape = ad.Tape()
    out = ad.conv2d(tape.constant(x), tape.constant(K), tape.constant(np.zeros(1))).data
    np.testing.assert_allclose(out, conv2d_naive(x, K, np.zeros(1)), rtol=0, atol=1e-12)
    # interior pixels of a ramp are unchanged by averaging
    np.testing.assert_allclose(out[0, 1:4, 1:4, 0], x[0, 1:4, 1:4, 0])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_conv2d_matches_direct_sum_randomly(seed):
    rng = np.random.default_rng(seed)
    c, f = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    x = rng.normal(size=(2, int(rng.integers(2, 6)), int(rng.integers(2, 6)), c))
    K, b = rng.normal(size=(3, 3, c, f)), rng.normal(size=f)
    tape = ad.Tape()
    out = ad.conv2d(tape.constant(x), tape.constant(K), tape.constant(b)).data
    np.testing.assert_allclose(out, conv2d_naive(x, K, b), atol=1e-10)


def test_maxpool_picks_window_maxima():
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    tape = ad.Tape()
    out = ad.maxpool2(tape.constant(x)).data[0, :, :, 0]
    assert out.tolist() == [[5.0, 7.0], [13.0, 15.0]]


def test_constant_loss_has_zero_gradients():
    tape = ad.Tape()
    x = leaf(tape, "x", [1.0, 2.0])
    loss = ad.total(ad.scale(x, 0.0))
    assert np.all(ad.backward(tape, loss)["x"] == 0)


def test_sum_of_squares_gradient():
    # sum(x^2) = x . x, built as a row times a column holding the same values;
    # the gradient of the square is the sum of both factors' gradients
    tape = ad.Tape()
    row = leaf(tape, "row", [[1.0, 2.0]])
    col = leaf(tape, "col", [[1.0], [2.0]])
    loss = ad.total(ad.dense(row, col, tape.constant(np.zeros(1))))
    assert float(loss.data) == 5.0
    g = ad.backward(tape, loss)
    assert (g["row"].ravel() + g["col"].ravel()).tolist() == [2.0, 4.0]


def test_unused_parameter_gets_zero_gradient():
    tape = ad.Tape()
    x = leaf(tape, "x", [1.0])
    leaf(tape, "unused", [5.0, 6.0])
    g = ad.backward(tape, ad.total(x))
    assert g["unused"].tolist() == [0.0, 0.0]


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = leaf(tape, "x", [1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, ad.relu(x))


def test_shape_errors_are_loud():
    tape = ad.Tape()
    with pytest.raises(ad.ShapeError):
        ad.add(tape.constant(np.zeros(3)), tape.constant(np.zeros(4)))
    with pytest.raises(ad.ShapeError):
        ad.dense(tape.constant(np.zeros((2, 3))), tape.constant(np.zeros((4, 2))), tape.constant(np.zeros(2)))
    with pytest.raises(ad.ShapeError):
        ad.maxpool2(tape.constant(np.zeros((1, 3, 4, 1))))
    with pytest.raises(ad.ShapeError):
        ad.softmax_cross_entropy(tape.constant(np.zeros((2, 3))), np.array([0, 3]))


def test_non_finite_values_raise():
    tape = ad.Tape()
    x = leaf(tape, "x", [1.0])
    with pytest.raises(ad.NonFiniteError):
        ad.scale(x, np.inf)


def test_tapes_cannot_mix():
    a, b = ad.Tape(), ad.Tape()
    with pytest.raises(ValueError):
        ad.add(a.constant([1.0]), b.constant([1.0]))


def test_duplicate_parameter_name():
    tape = ad.Tape()
    leaf(tape, "x", [1.0])
    with pytest.raises(KeyError):
        leaf(tape, "x", [1.0])


def test_softmax_loss_of_uniform_logits_is_log_classes():
    tape = ad.Tape()
    loss = ad.softmax_cross_entropy(tape.constant(np.zeros((3, 5))), np.array([0, 2, 4]))
    np.testing.assert_allclose(loss.data, math.log(5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_loss_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 20, size=(4, 3))
    tape = ad.Tape()
    assert np.all(ad.softmax_cross_entropy(tape.constant(z), rng.integers(0, 3, 4)).data >= 0)


def test_sigmoid_cross_entropy_is_stable_for_large_logits():
    tape = ad.Tape()
    out = ad.sigmoid_cross_entropy(tape.constant([[800.0, -800.0]]), np.array([[1, 0]])).data
    np.testing.assert_allclose(out, 0.0, atol=1e-300)


def test_concat_gradients_do_not_cross_talk():
    tape = ad.Tape()
    a, b = leaf(tape, "a", np.ones((2, 3))), leaf(tape, "b", np.ones((2, 2)))
    c = ad.concat([a, b])
    w = np.zeros((2, 5))
    w[:, :3] = 1.0  # the loss only reads branch a
    g = ad.backward(tape, ad.total(ad.mul_const(c, w)))
    assert np.all(g["a"] == 1.0) and np.all(g["b"] == 0.0)


def test_distance_kink_has_zero_subgradient():
    tape = ad.Tape()
    u = leaf(tape, "u", [[1.0, 1.0]])
    d = ad.l2_distance(u, tape.constant([[1.0, 1.0]]))
    assert np.all(ad.backward(tape, ad.total(d))["u"] == 0.0)


@pytest.mark.parametrize("name", sorted(G.OPERATORS))
def test_every_operator_passes_grad_check(name):
    for seed in range(3):
        fn, params = G.OPERATORS[name](np.random.default_rng(seed))
        report = grad_check(fn, params, tolerance=1e-4)
        assert report.passed, str(report)


def test_linear_model_is_checked_almost_exactly():
    rng = np.random.default_rng(0)
    fn, params = G.op_dense(rng)
    assert grad_check(fn, params).worst < 1e-8


def test_trunk_and_contrastive_loss_pass():
    rng = np.random.default_rng(3)
    fn, params = G.siamese_contrastive(rng, 3)
    assert grad_check(fn, params, tolerance=1e-4).passed


def test_corrupted_gradient_is_caught_and_named():
    def fn(tape, p):
        good = ad.total(ad.mul_const(p["x"], np.array([1.0, -2.0, 0.5])))
        # a deliberately broken op whose backward returns twice the true gradient
        broken = tape._record("broken", p["w"].data * 3.0, (p["w"],), lambda g: (2.0 * 3.0 * g,))
        return ad.add(good, ad.total(broken))

    report = grad_check(fn, {"x": np.array([1.0, 2.0, 3.0]), "w": np.array([0.4, -1.2])})
    assert not report.passed
    assert report.failures == ["w"]
    assert "BAD w" in str(report)


def test_grad_check_skips_kink_crossings():
    def fn(tape, p):
        return ad.total(ad.relu(p["x"]))

    report = grad_check(fn, {"x": np.array([1e-7, 1.0, -1.0])})
    assert report.passed
    assert report.params[0].skipped == 1


def test_grad_check_can_subsample_elements():
    fn, params = G.op_conv2d(np.random.default_rng(1))
    report = grad_check(fn, params, max_elements=5)
    assert all(p.checked + p.skipped <= 5 for p in report.params)


def test_checkpoint_round_trip_and_determinism(tmp_path):
    tensors = {"a.W": np.arange(6.0).reshape(2, 3), "a.b": np.array([0.5, -0.25]), "s": np.array(3.0)}
    blob = checkpoint.dumps(tensors, {"kind": "x", "z": 1})
    again, header = checkpoint.loads(blob)
    assert header == {"kind": "x", "z": 1}
    assert list(again) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(again[k], tensors[k])
    assert checkpoint.dumps(again, header) == blob
    p = tmp_path / "c.wlck"
    checkpoint.save(p, tensors)
    assert checkpoint.load(p)[0]["a.W"].shape == (2, 3)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
])
def test_corrupt_checkpoints_rejected(mutate):
    blob = checkpoint.dumps({"x": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(mutate(blob))
