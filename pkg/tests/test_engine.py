"""Tensor engine: op semantics, backward correctness, finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mml.engine as en
from mml.engine import (
    ContractError,
    DegenerateInputError,
    GatherIndexError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    backward,
    grad_check,
)


def leaf(tape, values):
    return tape.leaf(np.asarray(values, dtype=np.float32))


def watched(tape, key, values):
    p = Parameter(key, Tensor.of(values))
    return p, tape.watch(p)


class TestMatmul:
    def test_identity(self):
        out = en.matmul(Tensor.of(np.eye(2)), Tensor.of([[3.0, 4.0], [5.0, 6.0]]))
        assert np.array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_arithmetic(self):
        out = en.matmul(Tensor.of([[1.0, 2.0], [3.0, 4.0]]), Tensor.of([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17], [39]])

    def test_zero_annihilates(self):
        z = en.matmul(Tensor.of(np.zeros((2, 3))), Tensor.of(np.arange(12.0).reshape(3, 4)))
        assert not z.data.any()

    def test_dim_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4\)"):
            en.matmul(Tensor.of(np.zeros((2, 3))), Tensor.of(np.zeros((2, 4))))


class TestUnary:
    def test_relu(self):
        assert np.array_equal(en.apply_unary(Tensor.of([[-1.0, 2.0]]), "relu").data, [[0, 2]])

    def test_scale(self):
        assert np.array_equal(
            en.apply_unary(Tensor.of([[1.0, 2.0]]), "scale", c=2.0).data, [[2, 4]]
        )

    def test_layer_norm_two_values(self):
        out = en.apply_unary(Tensor.of([[1.0, 3.0]]), "layer_norm")
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_layer_norm_rejects_single_column(self):
        with pytest.raises(DegenerateInputError):
            en.layer_norm(Tensor.of([[1.0], [2.0]]))

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            en.apply_unary(Tensor.of([[1.0]]), "tanh")


class TestSoftmax:
    def test_uniform(self):
        out = en.softmax_lastdim(Tensor.of([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-6)

    def test_closed_form(self):
        out = en.softmax_lastdim(Tensor.of([[0.0, np.log(2.0)]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-6)

    def test_shift_invariance_no_overflow(self):
        out = en.softmax_lastdim(Tensor.of([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(
            st.lists(st.floats(-50, 50), min_size=1, max_size=6),
            min_size=1,
            max_size=4,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    def test_rows_sum_to_one_nonnegative(self, rows):
        out = en.softmax_lastdim(Tensor.of(rows)).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestGather:
    def test_identity_permutation(self):
        x = Tensor.of(np.arange(12.0).reshape(4, 3))
        assert np.array_equal(en.gather_rows(x, np.arange(4)).data, x.data)

    def test_repeated_rows_backward_scatter_adds(self):
        tape = Tape()
        p, x = watched(tape, "x", np.arange(12.0).reshape(4, 3))
        out = en.gather_rows(x, [2, 2])
        grads = backward(tape, en.sum_all(out))
        expected = np.zeros((4, 3))
        expected[2] = 2.0
        np.testing.assert_array_equal(grads["x"], expected)

    def test_empty_gather(self):
        out = en.gather_rows(Tensor.of(np.ones((4, 3))), [])
        assert out.shape == (0, 3)

    def test_out_of_range_names_value(self):
        with pytest.raises(GatherIndexError, match="7"):
            en.gather_rows(Tensor.of(np.ones((4, 3))), [0, 7])

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=12))
    def test_gradient_mass_conserved(self, idx):
        tape = Tape()
        p, x = watched(tape, "x", np.random.default_rng(0).normal(size=(5, 3)))
        out = en.gather_rows(x, idx)
        grads = backward(tape, en.sum_all(out))
        # incoming grad is 1 per gathered element
        assert grads["x"].sum() == pytest.approx(len(idx) * 3, abs=1e-4)


class TestBackward:
    def test_constant_root_zero_grads(self):
        tape = Tape()
        p, x = watched(tape, "x", np.ones((2, 2)))
        const = en.sum_all(leaf(tape, [[5.0]]))
        grads = backward(tape, const)
        assert not grads["x"].any()

    def test_matmul_symbolic(self):
        tape = Tape()
        p, a = watched(tape, "a", np.arange(6.0).reshape(2, 3))
        b = Tensor.of(np.arange(12.0).reshape(3, 4))
        grads = backward(tape, en.sum_all(en.matmul(a, b)))
        np.testing.assert_allclose(grads["a"], np.ones((2, 4)) @ b.data.T)

    def test_dead_relu_chain(self):
        tape = Tape()
        p, x = watched(tape, "x", -np.ones((2, 2)))
        out = en.relu(en.relu(x))
        grads = backward(tape, en.sum_all(out))
        assert not grads["x"].any()

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        p, x = watched(tape, "x", np.ones((2, 2)))
        with pytest.raises(ContractError):
            backward(tape, en.scale(x, 2.0))

    def test_unused_parameter_gets_zeros(self):
        tape = Tape()
        p1, x = watched(tape, "x", np.ones((2, 2)))
        p2, y = watched(tape, "y", np.ones((3, 1)))
        grads = backward(tape, en.sum_all(x))
        assert grads["y"].shape == (3, 1) and not grads["y"].any()


class TestDeterminism:
    def test_bitwise_identical_forward(self):
        rng = np.random.default_rng(7)
        x = Tensor.of(rng.normal(size=(16, 8)))
        w = Tensor.of(rng.normal(size=(8, 8)))

        def run():
            h = en.relu(en.matmul(x, w))
            h = en.layer_norm(h)
            return en.softmax_lastdim(h).data.tobytes()

        assert run() == run()


def _mlp_fn(tape, leaves):
    h = en.relu(en.add_bias(en.matmul(leaves["x"], leaves["w1"]), leaves["b1"]))
    out = en.matmul(h, leaves["w2"])
    return en.mean_all(out)


def _mlp_params():
    rng = np.random.default_rng(3)
    return {
        "x": Parameter("x", Tensor.of(rng.normal(size=(4, 5)))),
        "w1": Parameter("w1", Tensor.of(rng.normal(size=(5, 6)))),
        "b1": Parameter("b1", Tensor.of(rng.normal(size=6))),
        "w2": Parameter("w2", Tensor.of(rng.normal(size=(6, 2)))),
    }


class TestGradCheck:
    def test_two_layer_mlp_passes(self):
        report = grad_check(_mlp_fn, _mlp_params(), eps=1e-4, tol=1e-3)
        assert report.passed
        assert report.max_rel_err < 1e-3

    def test_parameterless_vacuous_pass(self):
        report = grad_check(lambda tape, leaves: en.sum_all(Tensor.of([[1.0]])), {})
        assert report.passed and report.entries == []

    def test_corrupted_gradient_fails(self):
        def doubled(x):
            def pull(g):
                return (2.0 * g,)

            return en._record(en._tape_of(x), (x,), pull, x.data.copy())

        params = {"w": Parameter("w", Tensor.of([[1.5, -0.5]]))}

        def fn(tape, leaves):
            return en.sum_all(doubled(leaves["w"]))

        report = grad_check(fn, params)
        assert not report.passed

    def test_eps_out_of_range(self):
        with pytest.raises(ContractError):
            grad_check(_mlp_fn, _mlp_params(), eps=0.5)

    def test_non_finite_forward_reported(self):
        params = {"w": Parameter("w", Tensor.of([[1.0]]))}

        def fn(tape, leaves):
            return en.log(en.add_scalar(leaves["w"], -2.0)) if False else en.scale(
                leaves["w"], float("inf")
            )

        report = grad_check(
            lambda t, l: en.sum_all(en.scale(l["w"], float("nan"))), params
        )
        assert report.failure is not None


_OP_POOL = st.sampled_from(["matmul", "relu", "layer_norm", "softmax", "bias", "scale"])


@settings(max_examples=20, deadline=None)
@given(st.lists(_OP_POOL, min_size=1, max_size=6), st.integers(0, 10_000))
def test_random_op_compositions_pass_grad_check(ops, seed):
    rng = np.random.default_rng(seed)
    n, c = 3, 4
    params = {
        "x": Parameter("x", Tensor.of(rng.normal(size=(n, c)))),
        "w": Parameter("w", Tensor.of(rng.normal(size=(c, c)))),
        "b": Parameter("b", Tensor.of(rng.normal(size=c))),
    }

    def fn(tape, leaves):
        h = leaves["x"]
        for op in ops:
            if op == "matmul":
                h = en.matmul(h, leaves["w"])
            elif op == "relu":
                h = en.relu(h)
            elif op == "layer_norm":
                h = en.layer_norm(h)
            elif op == "softmax":
                h = en.softmax_lastdim(h)
            elif op == "bias":
                h = en.add_bias(h, leaves["b"])
            elif op == "scale":
                h = en.scale(h, 1.7)
        return en.mean_all(h)

    report = grad_check(fn, params, eps=1e-4, tol=1e-3)
    assert report.passed, max(report.entries, key=lambda e: e.max_rel_err)


class TestFusedOps:
    def test_bilinear_matches_manual(self):
        rng = np.random.default_rng(0)
        F = Tensor.of(rng.normal(size=(12, 5)))  # one 3x4 map
        u = Tensor.of(np.array([[1.3], [2.0]]))
        v = Tensor.of(np.array([[0.7], [1.5]]))
        out = en.bilinear_gather(F, u, v, np.zeros(2, dtype=np.int64), 4, 3)

        def manual(uu, vv):
            x0, y0 = int(np.floor(uu)), int(np.floor(vv))
            x0, y0 = min(x0, 2), min(y0, 1)
            dx, dy = uu - x0, vv - y0
            m = F.data.reshape(3, 4, 5)
            return (
                m[y0, x0] * (1 - dx) * (1 - dy)
                + m[y0, x0 + 1] * dx * (1 - dy)
                + m[y0 + 1, x0] * (1 - dx) * dy
                + m[y0 + 1, x0 + 1] * dx * dy
            )

        np.testing.assert_allclose(out.data[0], manual(1.3, 0.7), rtol=1e-5)
        np.testing.assert_allclose(out.data[1], manual(2.0, 1.5), rtol=1e-5)

    def test_bilinear_grad(self):
        rng = np.random.default_rng(1)
        params = {
            "F": Parameter("F", Tensor.of(rng.normal(size=(12, 3)))),
            "uv": Parameter("uv", Tensor.of(rng.uniform(0.2, 2.2, size=(4, 2)))),
        }

        def fn(tape, leaves):
            u = en.slice_cols(leaves["uv"], 0, 1)
            v = en.slice_cols(leaves["uv"], 1, 2)
            out = en.bilinear_gather(leaves["F"], u, v, np.zeros(4, dtype=np.int64), 4, 3)
            return en.mean_all(out)

        assert grad_check(fn, params).passed

    def test_batched_attention_matches_loop(self):
        rng = np.random.default_rng(2)
        b, nq, m, c = 3, 4, 5, 6
        q = Tensor.of(rng.normal(size=(b * nq, c)))
        k = Tensor.of(rng.normal(size=(b * m, c)))
        v = Tensor.of(rng.normal(size=(b * m, c)))
        fused = en.batched_attention(q, k, v, b, 0.5)
        for i in range(b):
            qs = q.data[i * nq : (i + 1) * nq]
            ks = k.data[i * m : (i + 1) * m]
            vs = v.data[i * m : (i + 1) * m]
            s = qs @ ks.T * 0.5
            a = np.exp(s - s.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(
                fused.data[i * nq : (i + 1) * nq], a @ vs, rtol=2e-5, atol=1e-6
            )

    def test_batched_attention_grad(self):
        rng = np.random.default_rng(3)
        params = {
            "q": Parameter("q", Tensor.of(rng.normal(size=(4, 3)))),
            "k": Parameter("k", Tensor.of(rng.normal(size=(6, 3)))),
            "v": Parameter("v", Tensor.of(rng.normal(size=(6, 3)))),
        }

        def fn(tape, leaves):
            out = en.batched_attention(leaves["q"], leaves["k"], leaves["v"], 2, 0.7)
            return en.mean_all(out)

        assert grad_check(fn, params).passed

    def test_scatter_rows_roundtrip(self):
        rng = np.random.default_rng(4)
        x = Tensor.of(rng.normal(size=(6, 3)))
        idx = np.array([0, 2, 2, 1, 4, 0])
        out = en.scatter_rows(x, idx, 5)
        expected = np.zeros((5, 3), dtype=np.float32)
        for i, t in enumerate(idx):
            expected[t] += x.data[i]
        np.testing.assert_allclose(out.data, expected, rtol=1e-6)

    def test_group_ops(self):
        x = Tensor.of(np.arange(12.0).reshape(6, 2))
        w = Tensor.of(np.full((6, 1), 0.5))
        grouped = en.weighted_group_sum(x, w, 3)
        np.testing.assert_allclose(grouped.data, [[3.0, 4.5], [12.0, 13.5]])
        rep = en.repeat_rows(Tensor.of([[1.0, 2.0]]), 3)
        assert rep.shape == (3, 2)
        tiled = en.tile_rows(Tensor.of([[1.0], [2.0]]), 2)
        np.testing.assert_array_equal(tiled.data.ravel(), [1, 2, 1, 2])
