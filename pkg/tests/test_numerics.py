"""Tensor substrate tests: primitive values, adjoints vs central
differences, determinism, and error contracts."""

import math
import warnings

import numpy as np
import pytest

from rasr.errors import DataError, NumericsWarning
from rasr.numerics import (
    GradientError,
    ParamStore,
    ShapeError,
    Tape,
    cosine,
    finite_diff_check,
    l2_normalize,
    registered_ops,
)


class TestForwardValues:
    def test_row_softmax_symmetry(self):
        t = Tape()
        out = t.softmax_rows(t.leaf([[0.0, 0.0]]))
        np.testing.assert_allclose(out.value, [[0.5, 0.5]], atol=0)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        t = Tape()
        out = t.softmax_rows(t.leaf(rng.normal(size=(17, 9)) * 30))
        assert np.all(out.value >= 0)
        np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-6)

    def test_cosine_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_cosine_analytic(self):
        got = cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        assert abs(got - 1.0 / math.sqrt(2)) < 1e-5

    def test_cosine_bounds_and_self_similarity(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = rng.normal(size=rng.integers(2, 20))
            b = rng.normal(size=a.shape)
            c = cosine(a, b)
            assert -1.0 <= c <= 1.0
            assert abs(cosine(a, a) - 1.0) < 1e-6

    def test_cosine_zero_vector_warns_and_returns_zero(self):
        with pytest.warns(NumericsWarning):
            assert cosine(np.zeros(3), np.ones(3)) == 0.0

    def test_l2_normalize_unit_norm(self):
        rng = np.random.default_rng(2)
        v = l2_normalize(rng.normal(size=11))
        assert abs(np.linalg.norm(v) - 1.0) < 1e-9

    def test_l2_normalize_zero_guard(self):
        with pytest.warns(NumericsWarning):
            v = l2_normalize(np.zeros(4))
        assert np.all(v == 0.0)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(13, 7))
        w = rng.normal(size=(7, 5))

        def build():
            t = Tape()
            return t.sum_all(t.tanh(t.matmul(t.leaf(x), t.leaf(w)))).value

        assert np.array_equal(build(), build())

    def test_replay_reproduces_bitwise(self):
        rng = np.random.default_rng(4)
        t = Tape()
        a = t.leaf(rng.normal(size=(6, 6)))
        out = t.mean_all(t.sigmoid(t.matmul(a, t.leaf(rng.normal(size=(6, 3))))))
        assert np.array_equal(t.replay(), out.value)


class TestShapeErrors:
    def test_matmul_mismatch_names_op_and_dims(self):
        t = Tape()
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
            t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 2))))

    def test_add_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError, match="add"):
            t.add(t.leaf(np.ones(3)), t.leaf(np.ones(4)))

    def test_concat_rows_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError, match="concat_cols"):
            t.concat_cols([t.leaf(np.ones((2, 2))), t.leaf(np.ones((3, 2)))])

    def test_foreign_tape_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(np.ones(3))
        with pytest.raises(GradientError):
            t2.sigmoid(a)


class TestGradients:
    def test_linear_map_adjoint_is_outer_product(self):
        # loss = sum(W @ x) -> dW = ones outer x
        rng = np.random.default_rng(5)
        store = ParamStore()
        store.add("w", rng.normal(size=(4, 3)))
        x = rng.normal(size=(3, 1))
        t = Tape()
        loss = t.sum_all(t.matmul(t.param(store, "w"), t.leaf(x)))
        grads = t.gradients(loss)
        np.testing.assert_allclose(grads["w"], np.outer(np.ones(4), x.ravel()), atol=1e-12)

    def test_disconnected_parameter_gets_zeros(self):
        store = ParamStore()
        store.add("w", np.ones((2, 2)))
        store.add("b", np.ones(5))
        t = Tape()
        loss = t.sum_all(t.param(store, "w"))
        t.param(store, "b")  # bound but never used
        grads = t.gradients(loss)
        assert np.array_equal(grads["b"], np.zeros(5))
        assert np.array_equal(grads["w"], np.ones((2, 2)))

    def test_non_scalar_loss_rejected(self):
        t = Tape()
        v = t.leaf(np.ones(3))
        with pytest.raises(GradientError, match="scalar"):
            t.gradients(v)

    def test_mlp_bce_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        store = ParamStore()
        store.add("w1", rng.normal(size=(5, 4)))
        store.add("b1", rng.normal(size=4))
        store.add("w2", rng.normal(size=(4, 4)))
        store.add("b2", rng.normal(size=4))
        store.add("w3", rng.normal(size=(4, 1)))
        store.add("b3", rng.normal(size=1))
        x = rng.normal(size=(3, 5))
        y = rng.integers(0, 2, size=3).astype(float)

        def fn(s):
            t = Tape()
            h = t.tanh(t.linear(t.leaf(x), t.param(s, "w1"), t.param(s, "b1")))
            h = t.tanh(t.linear(h, t.param(s, "w2"), t.param(s, "b2")))
            p = t.reshape(t.sigmoid(t.linear(h, t.param(s, "w3"), t.param(s, "b3"))), (3,))
            p = t.clip(p, 1e-7, 1 - 1e-7)
            ones = t.leaf(np.ones(3))
            yv = t.leaf(y)
            ll = t.add(t.mul(yv, t.log(p)), t.mul(t.sub(ones, yv), t.log(t.sub(ones, p))))
            return t.affine(t.mean_all(ll), -1.0)

        assert finite_diff_check(fn, store, h=1e-5) < 1e-4


def _random_graph_for_op(op: str, rng: np.random.Generator):
    """Scalar-headed random instance exercising one primitive."""
    n = int(rng.integers(2, 8))
    d = int(rng.integers(2, 8))
    store = ParamStore()

    def head(t, var):
        w = t.leaf(rng.normal(size=var.value.shape))
        return t.sum_all(t.mul(var, w))

    def fn(s):
        t = Tape()
        x = t.param(s, "x")
        y = t.param(s, "y") if "y" in s else None
        if op == "add":
            out = t.add(x, y)
        elif op == "sub":
            out = t.sub(x, y)
        elif op == "mul":
            out = t.mul(x, y)
        elif op == "add_n":
            out = t.add_n([x, y, x])
        elif op == "affine":
            out = t.affine(x, 1.7, -0.3)
        elif op == "matmul":
            out = t.matmul(x, y)
        elif op == "add_bias":
            out = t.add_bias(x, y)
        elif op == "mul_colvec":
            out = t.mul_colvec(x, y)
        elif op == "rowsum":
            out = t.rowsum(x)
        elif op == "sum_all":
            out = t.sum_all(x)
        elif op == "mean_all":
            out = t.mean_all(x)
        elif op == "mean_rows":
            out = t.mean_rows(x)
        elif op == "softmax_rows":
            out = t.softmax_rows(x)
        elif op == "sigmoid":
            out = t.sigmoid(x)
        elif op == "tanh":
            out = t.tanh(x)
        elif op == "exp":
            out = t.exp(x)
        elif op == "log":
            out = t.log(t.affine(t.sigmoid(x), 1.0, 0.1))
        elif op == "clip":
            out = t.clip(x, -0.5, 0.5)
        elif op == "l2_normalize_rows":
            out = t.l2_normalize_rows(x)
        elif op == "cosine_rows":
            out = t.cosine_rows(x, y)
        elif op == "concat_cols":
            out = t.concat_cols([x, y])
        elif op == "slice_cols":
            out = t.slice_cols(x, 1, d)
        elif op == "reshape":
            out = t.reshape(x, (x.value.size,))
        elif op == "gather_rows":
            idx = np.array([0, 1, 0, n - 1])
            out = t.gather_rows(x, idx)
        elif op == "segment_sum":
            seg = np.array([i % 3 for i in range(n)])
            out = t.segment_sum(x, seg, 3)
        else:
            raise AssertionError(f"untested op {op}")
        return head(t, out)

    if op == "matmul":
        store.add("x", rng.normal(size=(n, d)))
        store.add("y", rng.normal(size=(d, n)))
    elif op == "add_bias":
        store.add("x", rng.normal(size=(n, d)))
        store.add("y", rng.normal(size=d))
    elif op == "mul_colvec":
        store.add("x", rng.normal(size=(n, d)))
        store.add("y", rng.normal(size=n))
    elif op in ("add", "sub", "mul", "add_n", "cosine_rows", "concat_cols"):
        store.add("x", rng.normal(size=(n, d)))
        store.add("y", rng.normal(size=(n, d)))
    else:
        store.add("x", rng.normal(size=(n, d)))
    return fn, store


_DIFFERENTIABLE_OPS = sorted(set(registered_ops()) - {"leaf"})


class TestPrimitiveAdjoints:
    @pytest.mark.parametrize("op", _DIFFERENTIABLE_OPS)
    def test_adjoint_matches_central_differences(self, op):
        """Every registered primitive passes the FD oracle on random shapes."""
        rng = np.random.default_rng(hash(op) % (2**32))
        for trial in range(3):
            fn, store = _random_graph_for_op(op, rng)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NumericsWarning)
                err = finite_diff_check(fn, store, h=1e-6)
            assert err < 1e-4, f"{op} trial {trial}: rel err {err}"

    def test_adjoints_up_to_64x64(self):
        rng = np.random.default_rng(99)
        store = ParamStore()
        store.add("x", rng.normal(size=(64, 64)))

        def fn(s):
            t = Tape()
            return t.mean_all(t.softmax_rows(t.param(s, "x")))

        # spot-check a slice of coordinates at this size via full graph FD
        loss = fn(store)
        grads = loss.tape.gradients(loss)
        h = 1e-6
        work = store["x"].copy()
        flat = work.ravel()
        worst = 0.0
        for j in range(0, flat.size, 257):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(loss.tape.replay({"x": work}, upto=loss.idx))
            flat[j] = orig - h
            fm = float(loss.tape.replay({"x": work}, upto=loss.idx))
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(grads["x"].ravel()[j] - fd) / max(1.0, abs(fd)))
        assert worst < 1e-4


class TestFiniteDiffCheck:
    def test_quadratic_is_exact_under_central_differences(self):
        store = ParamStore()
        store.add("x", np.array([3.0]))

        def fn(s):
            t = Tape()
            x = t.param(s, "x")
            return t.sum_all(t.mul(x, x))

        assert finite_diff_check(fn, store, h=1e-5) < 1e-9

    def test_constant_function_error_zero(self):
        store = ParamStore()
        store.add("x", np.array([1.0, 2.0]))

        def fn(s):
            t = Tape()
            t.param(s, "x")
            return t.sum_all(t.leaf(np.array([7.0])))

        assert finite_diff_check(fn, store, h=1e-5) == 0.0

    def test_rejects_bad_step(self):
        store = ParamStore()
        store.add("x", np.ones(1))
        with pytest.raises(DataError):
            finite_diff_check(lambda s: None, store, h=0.0)

    def test_rejects_non_finite(self):
        store = ParamStore()
        store.add("x", np.array([2.0]))

        def fn(s):
            t = Tape()
            x = t.param(s, "x")
            return t.sum_all(t.log(t.affine(x, 1.0, -2.0)))  # log(0) at base point

        with pytest.raises(DataError):
            finite_diff_check(fn, store, h=1e-5)


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        with pytest.raises(DataError):
            store.add("w", np.ones(2))

    def test_clone_is_independent(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        other = store.clone()
        other["w"] = np.zeros(2)
        assert np.array_equal(store["w"], np.ones(2))
