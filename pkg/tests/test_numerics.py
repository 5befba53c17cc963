import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from foreswe import numerics as nm
from foreswe.errors import NotPositiveDefinite, UnknownParameter

finite = st.floats(-50, 50, allow_nan=False)


def random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


class TestSoftmaxRows:
    def test_symmetric_row(self):
        np.testing.assert_allclose(nm.softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])

    def test_ln2_row(self):
        np.testing.assert_allclose(nm.softmax_rows([[math.log(2), 0.0]]), [[2 / 3, 1 / 3]], rtol=1e-14)

    def test_large_values_do_not_overflow(self):
        out = nm.softmax_rows([[1000.0, 1000.0]])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
    def test_rows_are_stochastic(self, m):
        out = nm.softmax_rows(m)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestCholeskySolve:
    def test_identity(self, rng):
        b = rng.standard_normal((3, 2))
        x, log_det = nm.cholesky_solve(np.eye(3), b)
        np.testing.assert_allclose(x, b)
        assert log_det == 0.0

    def test_two_by_two_log_det(self):
        _, log_det = nm.cholesky_solve(np.array([[4.0, 2.0], [2.0, 3.0]]), np.ones(2))
        assert log_det == pytest.approx(math.log(8.0), rel=1e-12)

    def test_indefinite_raises(self):
        a = np.diag([1.0, -1.0, 2.0])
        with pytest.raises(NotPositiveDefinite):
            nm.cholesky_solve(a, np.ones(3))

    def test_rank_deficient_gets_jitter(self):
        v = np.array([[1.0], [2.0], [3.0]])
        L, jitter = nm.jittered_cholesky(v @ v.T)
        assert jitter > 0
        assert np.all(np.diag(L) > 0)

    @given(st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_round_trip(self, n, seed):
        rng = np.random.default_rng(seed)
        a = random_spd(rng, n)
        b = rng.standard_normal((n, 2))
        x, log_det = nm.cholesky_solve(a, b)
        assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) < 1e-8
        L = np.linalg.cholesky(a)
        assert math.exp(log_det) == pytest.approx(np.prod(np.diag(L)) ** 2, rel=1e-10)


class TestTensorGradients:
    """Each primitive against central differences."""

    def check(self, objective, params, tol=1e-6):
        tape = nm.GradientTape(objective, params)
        for name in params:
            assert nm.grad_check(tape, name, 1e-6) < tol, name

    def test_elementwise_chain(self, rng):
        self.check(lambda p: (nm.exp(p["a"]) * nm.log(p["b"]) / nm.sqrt(p["b"]) - p["a"] ** 3).sum(),
                   {"a": rng.standard_normal(4), "b": rng.uniform(0.5, 2, 4)})

    def test_batched_matmul_and_softmax(self, rng):
        def obj(p):
            s = nm.softmax(p["x"] @ p["w"], axis=-1)
            return (s @ p["x"].swapaxes(-1, -2)).sum() + (s * s).mean()

        self.check(obj, {"x": rng.standard_normal((2, 3, 4)), "w": rng.standard_normal((4, 4))})

    def test_indexing_concat_stack(self, rng):
        def obj(p):
            a = p["a"][[0, 2, 2]]
            return (nm.concatenate([a, p["b"]], axis=0) ** 2).sum() + nm.stack([p["b"], p["b"]]).sum()

        self.check(obj, {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((1, 2))})

    def test_einsum(self, rng):
        self.check(lambda p: (nm.einsum("ni,mi,inm->nm", p["a"], p["b"], p["c"]) ** 2).sum(),
                   {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((4, 2)),
                    "c": rng.standard_normal((2, 3, 4))})

    def test_cholesky_and_triangular_solve(self, rng):
        a0 = random_spd(rng, 4)

        def obj(p):
            L = nm.cholesky(p["a"] @ p["a"].T + np.eye(4))
            v = nm.solve_triangular(L, p["b"])
            return (v * v).sum() + nm.log(nm.diagonal(L)).sum()

        self.check(obj, {"a": a0, "b": rng.standard_normal((4, 1))}, tol=1e-5)


class TestGradCheck:
    def test_square(self):
        tape = nm.GradientTape(lambda p: (p["x"] * p["x"]).sum(), {"x": np.array([3.0])})
        assert tape.gradients["x"][0] == 6.0
        assert nm.grad_check(tape, "x", 1e-5) < 1e-6

    def test_constant(self):
        tape = nm.GradientTape(lambda p: p["x"].sum() * 0.0 + 2.0, {"x": np.ones(2)})
        assert nm.grad_check(tape, "x", 1e-5) == 0.0

    def test_unknown_parameter(self):
        tape = nm.GradientTape(lambda p: p["x"].sum(), {"x": np.ones(2)})
        with pytest.raises(UnknownParameter):
            nm.grad_check(tape, "y")

    @pytest.mark.parametrize("eps", [0.0, -1e-6, 0.1])
    def test_bad_eps(self, eps):
        tape = nm.GradientTape(lambda p: p["x"].sum(), {"x": np.ones(2)})
        with pytest.raises(ValueError):
            nm.grad_check(tape, "x", eps)

    def test_replay_is_bit_identical(self, rng):
        params = {"w": rng.standard_normal((5, 5))}
        tape = nm.GradientTape(lambda p: nm.log((nm.exp(p["w"] @ p["w"])).sum()), params)
        assert tape.replay() == tape.value


class TestOptimizers:
    def test_clip_by_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped, norm = nm.clip_by_global_norm(grads, 1.0)
        assert norm == 5.0
        assert nm.global_norm(clipped) == pytest.approx(1.0)

    def test_adam_minimizes_quadratic(self):
        params = {"x": np.array([5.0, -3.0])}
        opt = nm.Adam(lr=0.1)
        for _ in range(500):
            params = opt.step(params, {"x": 2 * params["x"]})
        np.testing.assert_allclose(params["x"], 0.0, atol=1e-2)


class TestStandardizer:
    def test_constant_column_maps_to_zero(self):
        x = np.column_stack([np.full(5, 7.0), np.arange(5.0)])
        s = nm.Standardizer.fit(x)
        z = s.transform(x)
        np.testing.assert_array_equal(z[:, 0], 0.0)
        np.testing.assert_allclose(z[:, 1].std(), 1.0)

    def test_round_trip(self, rng):
        x = rng.standard_normal((10, 3)) * 5 + 2
        s = nm.Standardizer.from_dict(nm.Standardizer.fit(x).to_dict())
        np.testing.assert_allclose(s.inverse(s.transform(x)), x)
