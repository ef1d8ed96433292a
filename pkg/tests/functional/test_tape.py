"""
Functional tests for the reverse-mode gradient tape.

Every operation is checked against central finite differences in 64-bit
arithmetic by contracting its output with a fixed random tensor.
"""

from typing import Callable, List

import numpy as np
import pytest

from offroad_planner.errors import GraphError
from offroad_planner.seqmodel.tape import GradTape, Node
from tests.utils import numeric_gradient

TOLERANCE = 1e-4


def check_gradients(build: Callable[..., Node], inputs: List[np.ndarray], seed: int = 0) -> float:
    """Max relative error between tape and finite-difference gradients of sum(out * R)."""
    tape = GradTape()
    leaves = [tape.leaf(v, name=f"x{i}") for i, v in enumerate(inputs)]
    out = build(tape, *leaves)
    contraction = np.random.default_rng(seed).normal(size=out.shape)
    grads = tape.backward(tape.sum(tape.mul(out, tape.constant(contraction))))

    def scalar(values: List[np.ndarray]) -> float:
        inference = GradTape(record=False)
        result = build(inference, *[inference.leaf(v) for v in values])
        return float(np.sum(result.value * contraction))

    worst = 0.0
    for i, value in enumerate(inputs):
        def f(x, i=i):
            values = list(inputs)
            values[i] = x
            return scalar(values)

        numeric = numeric_gradient(f, value)
        analytic = grads[f"x{i}"]
        assert analytic.shape == value.shape, f"Gradient shape {analytic.shape} != input shape {value.shape}"
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
        worst = max(worst, float(rel.max()))
    return worst


@pytest.fixture
def arrays(rng):
    def make(*shape):
        return rng.normal(size=shape)
    return make


@pytest.mark.smoke
class TestElementwiseOps:
    """Test suite for elementwise and broadcasting operations."""

    def test_add_broadcast(self, arrays):
        """Test add with a broadcast bias."""
        assert check_gradients(lambda t, a, b: t.add(a, b), [arrays(3, 4), arrays(4)]) < TOLERANCE

    def test_mul_broadcast(self, arrays):
        """Test mul with a broadcast row."""
        assert check_gradients(lambda t, a, b: t.mul(a, b), [arrays(2, 3, 4), arrays(1, 4)]) < TOLERANCE

    def test_scale(self, arrays):
        """Test multiplication by a Python scalar."""
        assert check_gradients(lambda t, a: t.scale(a, -2.5), [arrays(5)]) < TOLERANCE

    def test_tanh(self, arrays):
        """Test tanh."""
        assert check_gradients(lambda t, a: t.tanh(a), [arrays(3, 3)]) < TOLERANCE

    def test_sigmoid(self, arrays):
        """Test sigmoid."""
        assert check_gradients(lambda t, a: t.sigmoid(a), [arrays(3, 3)]) < TOLERANCE

    def test_exp(self, arrays):
        """Test exp."""
        assert check_gradients(lambda t, a: t.exp(a), [arrays(4)]) < TOLERANCE

    def test_relu_away_from_kink(self):
        """Test relu on inputs bounded away from zero."""
        x = np.array([[-1.5, 0.7], [2.0, -0.3]])

        assert check_gradients(lambda t, a: t.relu(a), [x]) < TOLERANCE

    def test_variance_above_floor(self, arrays):
        """Test the floored exponential where the floor is inactive."""
        assert check_gradients(lambda t, a: t.variance(a, 1e-6), [arrays(6)]) < TOLERANCE

    def test_variance_floor_blocks_gradient(self):
        """Test that floored entries pass no gradient."""
        tape = GradTape()
        log_var = tape.leaf(np.array([-20.0, 0.0]), name="lv")
        var = tape.variance(log_var, 1e-6)
        grads = tape.backward(tape.sum(var))

        assert var.value[0] == 1e-6
        assert grads["lv"][0] == 0.0
        assert grads["lv"][1] == pytest.approx(1.0)


class TestStructuralOps:
    """Test suite for matmul, reshaping, indexing and joins."""

    def test_matmul_shared_weight(self, arrays):
        """Test a batched input times a 2-D weight."""
        assert check_gradients(lambda t, a, b: t.matmul(a, b), [arrays(2, 3, 4), arrays(4, 5)]) < TOLERANCE

    def test_matmul_batched(self, arrays):
        """Test batched matrix products on both sides."""
        assert check_gradients(lambda t, a, b: t.matmul(a, b), [arrays(2, 3, 4), arrays(2, 4, 2)]) < TOLERANCE

    def test_affine(self, arrays):
        """Test the dense layer."""
        assert check_gradients(lambda t, x, w, b: t.affine(x, w, b), [arrays(3, 4), arrays(4, 2), arrays(2)]) < TOLERANCE

    def test_reshape(self, arrays):
        """Test reshape."""
        assert check_gradients(lambda t, a: t.tanh(t.reshape(a, (3, 4))), [arrays(2, 6)]) < TOLERANCE

    def test_getitem_slice(self, arrays):
        """Test basic slicing."""
        assert check_gradients(lambda t, a: t.getitem(a, (slice(None), slice(1, 3))), [arrays(3, 4)]) < TOLERANCE

    def test_getitem_integer(self, arrays):
        """Test integer indexing along the last axis."""
        assert check_gradients(lambda t, a: t.getitem(a, (slice(None), slice(None), 0)), [arrays(2, 3, 2)]) < TOLERANCE

    def test_concat(self, arrays):
        """Test concatenation along a middle axis."""
        assert check_gradients(lambda t, a, b: t.concat([a, b], axis=1), [arrays(2, 1, 3), arrays(2, 4, 3)]) < TOLERANCE

    def test_stack(self, arrays):
        """Test stacking along a new axis."""
        assert check_gradients(lambda t, a, b: t.stack([a, b], axis=1), [arrays(2, 3), arrays(2, 3)]) < TOLERANCE

    def test_sum(self, arrays):
        """Test full reduction."""
        assert check_gradients(lambda t, a: t.sum(t.tanh(a)), [arrays(3, 2)]) < TOLERANCE


class TestCompositeOps:
    """Test suite for softmax, normalization, attention and recurrence."""

    def test_softmax(self, arrays):
        """Test softmax over the last axis."""
        assert check_gradients(lambda t, a: t.softmax(a), [arrays(3, 5)]) < TOLERANCE

    def test_layer_norm(self, arrays):
        """Test layer normalization including gain and bias."""
        assert check_gradients(lambda t, x, g, b: t.layer_norm(x, g, b), [arrays(2, 3, 6), arrays(6), arrays(6)]) < TOLERANCE

    def test_causal_attention(self, arrays):
        """Test two-head causal attention with respect to q, k and v."""
        inputs = [arrays(2, 5, 4), arrays(2, 5, 4), arrays(2, 5, 4)]

        assert check_gradients(lambda t, q, k, v: t.causal_attention(q, k, v, 2), inputs) < TOLERANCE

    def test_lstm_cell(self, arrays):
        """Test one LSTM step with respect to every input."""
        w = 3
        inputs = [arrays(2, w), arrays(2, w), arrays(2, w), arrays(w, 4 * w), arrays(w, 4 * w), arrays(4 * w)]

        assert check_gradients(lambda t, x, h, c, wx, wh, b: t.lstm_cell(x, h, c, wx, wh, b), inputs) < TOLERANCE

    def test_cross_entropy(self, arrays):
        """Test the mean cross-entropy loss."""
        labels = np.array([[0, 8, 3], [5, 5, 1]])

        assert check_gradients(lambda t, logits: t.cross_entropy(logits, labels), [arrays(2, 3, 9)]) < TOLERANCE

    def test_gaussian_nll(self, arrays):
        """Test the Gaussian NLL with respect to mean and variance."""
        targets = np.array([[0.3, -1.0], [2.0, 0.1]])
        var = np.exp(arrays(2, 2) * 0.3)

        assert check_gradients(lambda t, mu, v: t.gaussian_nll(mu, v, targets), [arrays(2, 2), var]) < TOLERANCE


class TestAttentionMask:
    """Test suite for causal masking."""

    def test_future_weights_are_zero(self, arrays):
        """Test that no position attends to a later one."""
        tape = GradTape(record=False)
        q, k, v = (tape.leaf(arrays(1, 6, 4)) for _ in range(3))
        node = tape.causal_attention(q, k, v, 2)
        weights = node.cache["attention"]

        assert weights.shape == (1, 2, 6, 6)
        assert np.all(weights[..., np.triu_indices(6, k=1)[0], np.triu_indices(6, k=1)[1]] == 0.0)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0)

    def test_output_ignores_future_values(self, arrays):
        """Test that editing later positions leaves earlier outputs unchanged."""
        q, k, v = arrays(1, 5, 4), arrays(1, 5, 4), arrays(1, 5, 4)
        tape = GradTape(record=False)
        before = tape.causal_attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), 2).value
        k[:, 3:] += 10.0
        v[:, 3:] -= 10.0
        after = tape.causal_attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), 2).value

        np.testing.assert_allclose(before[:, :3], after[:, :3], rtol=0, atol=1e-14)


class TestTapeMisuse:
    """Test suite for tape errors."""

    def test_foreign_node_rejected(self):
        """Test combining nodes from two tapes raises GraphError."""
        a, b = GradTape(), GradTape()
        with pytest.raises(GraphError):
            a.add(a.leaf(np.ones(2)), b.leaf(np.ones(2)))

    def test_backward_without_recording(self):
        """Test an inference tape cannot differentiate."""
        tape = GradTape(record=False)
        with pytest.raises(GraphError):
            tape.backward(tape.sum(tape.leaf(np.ones(2))))

    def test_non_scalar_loss(self):
        """Test backward needs a scalar."""
        tape = GradTape()
        with pytest.raises(GraphError):
            tape.backward(tape.tanh(tape.leaf(np.ones(3))))

    def test_shared_node_accumulates(self):
        """Test a node used twice receives both gradient contributions."""
        tape = GradTape()
        x = tape.leaf(np.array([2.0]), name="x")
        grads = tape.backward(tape.sum(tape.mul(x, x)))

        assert grads["x"][0] == pytest.approx(4.0)

    def test_unreached_leaf_has_zero_gradient(self):
        """Test leaves not on the loss path get zeros."""
        tape = GradTape()
        x = tape.leaf(np.array([1.0, 2.0]), name="x")
        tape.leaf(np.array([3.0]), name="unused")
        grads = tape.backward(tape.sum(x))

        np.testing.assert_array_equal(grads["unused"], [0.0])
