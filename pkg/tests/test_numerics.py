import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ghalab import numerics as nx
from ghalab.numerics import Tensor, gradcheck
from ghalab.numerics.gradcheck import random_tensor

TOL = 1e-4


def _loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestTensorContract:
    def test_shape_matches_data(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert int(np.prod(t.shape)) == t.data.size

    def test_grad_shape_matches_data(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        (x * x).sum().backward()
        assert x.grad.shape == x.data.shape

    def test_square_gradient(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        (x * x).backward()
        assert float(x.grad) == 6.0

    def test_detached_has_no_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=False)
        w = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        (x * w).sum().backward()
        assert x.grad is None
        np.testing.assert_array_equal(w.grad, [1.0, 2.0])

    def test_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x * 3.0 + x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0 + 1.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(nx.ShapeError):
            (x * 2.0).backward()

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with nx.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_float32_stays_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        y = (x * 2.0 + 1.0) / 3.0
        assert y.data.dtype == np.float32


class TestMatmul:
    def test_identity_left(self):
        b = np.arange(6.0).reshape(2, 3)
        out = nx.matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_zero_annihilates(self):
        b = np.random.default_rng(0).standard_normal((2, 3))
        out = nx.matmul(Tensor(np.zeros((2, 2))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        out = nx.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, _loop_matmul(a, b), atol=1e-6)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_gradcheck_batched(self):
        rng = np.random.default_rng(2)
        a, b = random_tensor(rng, 2, 3, 4), random_tensor(rng, 2, 4, 5)
        assert gradcheck(lambda: (nx.matmul(a, b) ** 2).sum(), [a, b]) < TOL


class TestSoftmax:
    def test_zero_pair(self):
        np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(2)), -1).data, [0.5, 0.5])

    def test_ln3(self):
        out = nx.softmax(Tensor(np.array([0.0, math.log(3.0)])), -1).data
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)

    def test_large_inputs(self):
        out = nx.softmax(Tensor(np.array([1000.0, 1000.0])), -1).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_distribution_and_shift(self, x, c):
        p = nx.softmax(Tensor(x), -1).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(nx.softmax(Tensor(x + c), -1).data, p, atol=1e-10)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        x = random_tensor(rng, 3, 6)
        w = Tensor(rng.standard_normal((3, 6)))
        assert gradcheck(lambda: (nx.softmax(x, -1) * w).sum(), [x]) < TOL
        assert gradcheck(lambda: (nx.log_softmax(x, -1) * w).sum(), [x]) < TOL


class TestLayerNorm:
    def _ln(self, x, gain=1.0, bias=0.0):
        d = x.shape[-1]
        return nx.layer_norm(Tensor(np.asarray(x, float)), Tensor(np.full(d, gain)),
                             Tensor(np.full(d, bias))).data

    def test_constant_vector(self):
        np.testing.assert_allclose(self._ln(np.full(4, 7.0)), np.zeros(4), atol=1e-12)

    def test_two_values(self):
        np.testing.assert_allclose(self._ln(np.array([1.0, 3.0])), [-1.0, 1.0], atol=1e-5)

    def test_zero_gain(self):
        x = np.random.default_rng(0).standard_normal((2, 5))
        np.testing.assert_allclose(self._ln(x, gain=0.0, bias=0.3), np.full((2, 5), 0.3))

    def test_moments(self):
        x = np.random.default_rng(1).standard_normal((4, 16)) * 5 + 2
        y = self._ln(x)
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-4)

    def test_gain_shape_mismatch(self):
        with pytest.raises((nx.ShapeError, ValueError)):
            nx.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        x, g, b = random_tensor(rng, 3, 5), random_tensor(rng, 5), random_tensor(rng, 5)
        w = Tensor(rng.standard_normal((3, 5)))
        assert gradcheck(lambda: (nx.layer_norm(x, g, b) * w).sum(), [x, g, b]) < TOL


class TestCrossEntropy:
    def test_uniform_logits(self):
        for s in (0.0, 0.1, 0.5):
            loss = nx.cross_entropy(Tensor(np.zeros((4, 7))), np.array([0, 1, 2, 6]), s)
            assert float(loss.data) == pytest.approx(math.log(7))

    def test_binary_uniform(self):
        loss = nx.cross_entropy(Tensor(np.zeros((1, 2))), np.array([0]), 0.1)
        assert float(loss.data) == pytest.approx(math.log(2))

    def test_confident_correct(self):
        logits = np.full((1, 5), -1e4)
        logits[0, 3] = 1e4
        assert float(nx.cross_entropy(Tensor(logits), np.array([3]), 0.0).data) < 1e-9

    def test_smoothing_matches_explicit_mixture(self):
        rng = np.random.default_rng(5)
        logits, tgt, s = rng.standard_normal((6, 5)), rng.integers(0, 5, 6), 0.2
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        q = np.full((6, 5), s / 5)
        q[np.arange(6), tgt] += 1 - s
        expected = -(q * logp).sum(-1).mean()
        got = float(nx.cross_entropy(Tensor(logits), tgt, s).data)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_ignore_index(self):
        logits = np.random.default_rng(6).standard_normal((4, 5))
        tgt = np.array([1, 0, 2, 0])
        full = nx.cross_entropy(Tensor(logits[[0, 2]]), tgt[[0, 2]], 0.1)
        masked = nx.cross_entropy(Tensor(logits), tgt, 0.1, ignore_index=0)
        assert float(masked.data) == pytest.approx(float(full.data))

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            nx.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        x = random_tensor(rng, 2, 3, 6)
        tgt = rng.integers(0, 6, (2, 3))
        assert gradcheck(lambda: nx.cross_entropy(x, tgt, 0.1), [x]) < TOL

    def test_softmax_ce_composite_h1e3(self):
        rng = np.random.default_rng(8)
        x = random_tensor(rng, 4, 5)
        tgt = rng.integers(0, 5, 4)
        assert gradcheck(lambda: nx.cross_entropy(x, tgt, 0.0), [x], h=1e-3) < TOL


class TestOpGradients:
    """Finite-difference checks for the remaining tape operations (float64)."""

    rng = np.random.default_rng(9)

    @pytest.mark.parametrize("name,fn", [
        ("add", lambda a, b: (a + b) * a),
        ("sub", lambda a, b: (a - b) * b),
        ("mul", lambda a, b: a * b * a),
        ("div", lambda a, b: a / (b * b + 1.0)),
        ("neg", lambda a, b: -a * b),
        ("power", lambda a, b: (a * a + 1.0) ** 1.5),
        ("sqrt", lambda a, b: nx.sqrt(a * a + 1.0)),
        ("exp", lambda a, b: nx.exp(a) * b),
        ("log", lambda a, b: nx.log(a * a + 1.0)),
        ("relu", lambda a, b: nx.relu(a) * b),
        ("broadcast", lambda a, b: a + b[0]),
        ("transpose", lambda a, b: nx.transpose(a, (1, 0)) * b.T),
        ("swapaxes", lambda a, b: nx.swapaxes(a, 0, 1) * b.T),
        ("reshape", lambda a, b: nx.reshape(a, (12,)) * nx.reshape(b, (12,))),
        ("getitem", lambda a, b: a[1:, ::2] * b[:2, :2]),
        ("concat", lambda a, b: nx.concatenate([a, b], axis=0) * 2.0),
        ("stack", lambda a, b: nx.stack([a, b], axis=1) ** 2),
        ("mean", lambda a, b: nx.mean(a * b, axis=1) ** 2),
    ])
    def test_gradcheck(self, name, fn):
        a = random_tensor(self.rng, 3, 4)
        b = random_tensor(self.rng, 3, 4)
        a.data += 0.05 * np.sign(a.data)  # keep relu kinks away from the stencil
        assert gradcheck(lambda: fn(a, b).sum(), [a, b]) < TOL, name

    def test_linear(self):
        x, w, b = (random_tensor(self.rng, 2, 3, 4), random_tensor(self.rng, 4, 5),
                   random_tensor(self.rng, 5))
        assert gradcheck(lambda: (nx.linear(x, w, b) ** 2).sum(), [x, w, b]) < TOL

    def test_embedding(self):
        table = random_tensor(self.rng, 6, 3)
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        assert gradcheck(lambda: (nx.embedding(table, ids) ** 2).sum(), [table]) < TOL

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            nx.embedding(Tensor(np.zeros((3, 2))), np.array([3]))

    def test_clip(self):
        x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
        nx.clip(x, -1.0, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.ones((4, 4)))
        out = nx.dropout(x, 0.5, np.random.default_rng(0), training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_dropout_preserves_expectation(self):
        x = Tensor(np.ones((200, 200)))
        out = nx.dropout(x, 0.3, np.random.default_rng(0), training=True)
        assert abs(out.data.mean() - 1.0) < 0.02


class TestSchedule:
    sched = nx.LrSchedule(warmup_steps=4000, peak_lr=5e-4)

    def test_peak(self):
        assert nx.inverse_sqrt_lr(4000, self.sched) == pytest.approx(5e-4)

    def test_half_ramp(self):
        assert nx.inverse_sqrt_lr(2000, self.sched) == pytest.approx(2.5e-4)

    def test_decay(self):
        assert nx.inverse_sqrt_lr(16000, self.sched) == pytest.approx(2.5e-4)

    def test_continuous_at_warmup(self):
        left = nx.inverse_sqrt_lr(4000, self.sched)
        right = nx.inverse_sqrt_lr(4001, self.sched)
        assert abs(left - right) / left < 1e-3

    @given(st.integers(1, 10**7))
    def test_positive(self, step):
        assert nx.inverse_sqrt_lr(step, self.sched) > 0

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            nx.inverse_sqrt_lr(0, self.sched)


class TestAdam:
    def _state(self):
        return nx.OptimizerState(beta1=0.9, beta2=0.98, eps=1e-8)

    def test_zero_grad_fresh_state(self):
        p = {"w": np.array([1.0, -2.0])}
        new = nx.adam_step(p, {"w": np.zeros(2)}, self._state(), lr=1e-2)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step_is_sign(self):
        g = np.array([3.0, -0.2, 1e-3])
        new = nx.adam_step({"w": np.zeros(3)}, {"w": g}, self._state(), lr=0.1)
        np.testing.assert_allclose(new["w"], -0.1 * np.sign(g), rtol=1e-4)

    def test_first_step_linear_in_lr(self):
        g = np.array([0.5, -1.5])
        d1 = nx.adam_step({"w": np.zeros(2)}, {"w": g}, self._state(), lr=0.01)["w"]
        d2 = nx.adam_step({"w": np.zeros(2)}, {"w": g}, self._state(), lr=0.03)["w"]
        np.testing.assert_allclose(d2, 3 * d1)

    def test_step_counter(self):
        s = self._state()
        p = {"w": np.ones(2)}
        for i in range(1, 4):
            p = nx.adam_step(p, {"w": np.ones(2)}, s, lr=1e-3)
            assert s.step == i
        assert s.m["w"].shape == p["w"].shape == s.v["w"].shape

    def test_decoupled_weight_decay(self):
        new = nx.adam_step({"w": np.array([2.0])}, {"w": np.zeros(1)}, self._state(), lr=0.1,
                           weight_decay=0.5)
        np.testing.assert_allclose(new["w"], [2.0 - 0.1 * 0.5 * 2.0])

    def test_shape_mismatch(self):
        s = self._state()
        s.m["w"] = np.zeros(3)
        s.v["w"] = np.zeros(3)
        with pytest.raises(nx.ShapeError):
            nx.adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, s, lr=1e-3)

    def test_adam_minimises_quadratic(self):
        w = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = nx.Adam([("w", w)], weight_decay=0.0)
        for _ in range(500):
            opt.zero_grad()
            (w * w).sum().backward()
            opt.step(0.05)
        assert np.abs(w.data).max() < 0.05


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = random_tensor(rng, 4, 6)
        w = random_tensor(rng, 6, 3)
        nx.cross_entropy(nx.matmul(x, w), np.array([0, 1, 2, 0]), 0.1).backward()
        return w.grad.copy()

    np.testing.assert_array_equal(run(), run())
