import math

import numpy as np
import pytest

from dynalab.diffmath import (AdamState, ContractError, DimensionError, FormatError, ParamSet,
                              Tape, adam_step, backward, forward_mlp, gaussian_nll, load_params,
                              make_mlp, polyak_update, save_params, squashed_gaussian_sample)
from dynalab.diffmath import tape as T
from dynalab.diffmath.serialize import dumps, loads

from .conftest import fd_gradient, max_rel_err


def scalar_loop_mlp(params, x, activation, layernorm):
    """Reference forward pass using only Python floats and math."""
    acts = {
        "relu": lambda v: max(v, 0.0),
        "tanh": math.tanh,
        "swish": lambda v: v / (1.0 + math.exp(-v)),
    }
    depth = sum(1 for k in params if k.startswith("W"))
    out = []
    for row in x.tolist():
        h = row
        for i in range(depth):
            W, b = params[f"W{i}"], params[f"b{i}"]
            z = [b[j] + sum(h[k] * W[k, j] for k in range(len(h))) for j in range(W.shape[1])]
            if i < depth - 1:
                if layernorm:
                    mu = sum(z) / len(z)
                    var = sum((v - mu) ** 2 for v in z) / len(z)
                    g, beta = params[f"ln_g{i}"], params[f"ln_b{i}"]
                    z = [(v - mu) / math.sqrt(var + 1e-8) * g[j] + beta[j] for j, v in enumerate(z)]
                z = [acts[activation](v) for v in z]
            h = z
        out.append(h)
    return np.array(out)


class TestForwardMLP:
    def test_zero_weights_give_bias(self, rng):
        p = make_mlp([3, 4, 2], rng)
        p.flat[...] = 0.0
        p["b1"] = [0.5, -1.5]
        out = forward_mlp(p, rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(out, np.tile([0.5, -1.5], (5, 1)))

    def test_identity_relu(self):
        p = ParamSet.from_arrays({"W0": np.eye(2), "b0": np.zeros(2), "W1": np.eye(2), "b1": np.zeros(2)})
        out = forward_mlp(p, np.array([[-1.0, 2.0]]), "relu")
        np.testing.assert_array_equal(out, [[0.0, 2.0]])

    @pytest.mark.parametrize("activation", ["relu", "tanh", "swish"])
    @pytest.mark.parametrize("layernorm", [False, True])
    def test_matches_scalar_loop(self, activation, layernorm):
        rng = np.random.default_rng(7)
        p = make_mlp([4, 6, 5, 3], rng, layernorm=layernorm)
        if layernorm:
            for k in p:
                if k.startswith("ln_"):
                    p[k] = rng.normal(size=p[k].shape)
        x = rng.normal(size=(8, 4))
        np.testing.assert_allclose(forward_mlp(p, x, activation, layernorm),
                                   scalar_loop_mlp(p, x, activation, layernorm), rtol=0, atol=1e-12)

    def test_shape_error_names_layer(self, rng):
        p = make_mlp([3, 4, 2], rng)
        with pytest.raises(DimensionError, match="W0"):
            forward_mlp(p, np.zeros((2, 5)))

    def test_taped_and_plain_paths_agree(self, rng):
        p = make_mlp([3, 8, 2], rng, layernorm=True)
        x = rng.normal(size=(4, 3))
        tape = Tape()
        out = forward_mlp(tape.watch(p), x, "swish", True)
        np.testing.assert_array_equal(out.value, forward_mlp(p, x, "swish", True))

    def test_member_axis_matches_separate_members(self, rng):
        stacked = make_mlp([3, 5, 2], rng, members=4)
        x = rng.normal(size=(6, 3))
        out = forward_mlp(stacked, x)
        for m in range(4):
            single = ParamSet.from_arrays({k: v[m].reshape(v.shape[1:]) if v.ndim == 3 else v[m, 0]
                                           for k, v in stacked.items()})
            np.testing.assert_allclose(out[m], forward_mlp(single, x), atol=1e-13)

    def test_layernorm_rows_standardized(self, rng):
        x = rng.normal(loc=3.0, scale=2.0, size=(50, 16))
        y = T.layernorm(x, np.ones(16), np.zeros(16))
        assert np.max(np.abs(y.mean(axis=1))) <= 1e-6
        assert np.max(np.abs(y.var(axis=1) - 1.0)) <= 1e-6

    def test_init_is_deterministic(self):
        a = make_mlp([3, 16, 16, 2], np.random.default_rng(5), layernorm=True)
        b = make_mlp([3, 16, 16, 2], np.random.default_rng(5), layernorm=True)
        assert a.flat.tobytes() == b.flat.tobytes()
        assert a.allfinite()


class TestBackward:
    def test_sum_of_params_gives_ones(self, rng):
        p = make_mlp([2, 3, 1], rng)
        tape = Tape()
        leaves = tape.watch(p)
        loss = None
        for node in leaves.values():
            s = T.sum(node)
            loss = s if loss is None else T.add(loss, s)
        g = backward(tape, loss)
        np.testing.assert_array_equal(g.flat, np.ones_like(p.flat))

    def test_zero_times_loss_gives_zeros(self, rng):
        p = make_mlp([2, 3, 1], rng)
        tape = Tape()
        out = forward_mlp(tape.watch(p), rng.normal(size=(4, 2)))
        g = backward(tape, T.mul(T.sum(out), 0.0))
        assert np.all(g.flat == 0.0)

    def test_unused_params_get_exact_zero(self, rng):
        p = ParamSet.from_arrays({"a": rng.normal(size=3), "b": rng.normal(size=2)})
        tape = Tape()
        leaves = tape.watch(p)
        g = backward(tape, T.sum(T.square(leaves["a"])))
        np.testing.assert_array_equal(g["b"], np.zeros(2))
        np.testing.assert_allclose(g["a"], 2 * p["a"])

    def test_nonscalar_loss_rejected(self, rng):
        p = make_mlp([2, 3], rng)
        tape = Tape()
        out = forward_mlp(tape.watch(p), np.ones((4, 2)))
        with pytest.raises(ContractError):
            backward(tape, out)

    def test_loss_from_other_tape_rejected(self, rng):
        p = make_mlp([2, 1], rng)
        t1, t2 = Tape(), Tape()
        loss = T.sum(forward_mlp(t1.watch(p), np.ones((1, 2))))
        with pytest.raises(ContractError):
            backward(t2, loss)

    def test_random_net_matches_finite_differences(self, rng):
        p = make_mlp([3, 5, 4, 2], rng, layernorm=True)
        x = rng.normal(size=(6, 3))
        target = rng.normal(size=(6, 2))

        def loss_value():
            return np.sum((forward_mlp(p, x, "tanh", True) - target) ** 2)

        tape = Tape()
        out = forward_mlp(tape.watch(p), x, "tanh", True)
        g = backward(tape, T.sum(T.square(T.sub(out, target))))
        assert max_rel_err(g.flat, fd_gradient(loss_value, p.flat)) <= 1e-4


class TestAdam:
    def test_zero_gradient_keeps_params_and_decays_moments(self):
        p = ParamSet.from_arrays({"w": np.array([1.0, -2.0])})
        st = AdamState.for_params(p)
        st.m[...] = [0.5, 0.5]
        st.v[...] = [0.2, 0.2]
        before = p.flat.copy()
        adam_step(st, p, p.zeros_like())
        # with zero gradient the moments shrink but the update is nonzero only via
        # the old moments; fresh state must leave parameters untouched
        assert np.all(np.abs(st.m) < 0.5) and np.all(st.v < 0.2)
        p2 = ParamSet.from_arrays({"w": before.copy()})
        st2 = AdamState.for_params(p2)
        adam_step(st2, p2, p2.zeros_like())
        np.testing.assert_array_equal(p2.flat, before)

    def test_single_step_hand_computed(self):
        # t=1, g=1: m=0.1, v=0.001, m_hat=1, v_hat=1 -> delta = lr / (1 + eps)
        p = ParamSet.from_arrays({"w": np.array([0.0])})
        st = AdamState.for_params(p, lr=0.0003, beta1=0.9, beta2=0.999, eps=0.00015)
        g = ParamSet.from_arrays({"w": np.array([1.0])})
        adam_step(st, p, g)
        assert p["w"][0] == pytest.approx(-0.0003 / 1.00015, rel=1e-12)
        assert p["w"][0] == pytest.approx(-2.999550067489876e-4, rel=1e-12)
        assert st.step == 1

    def test_constant_gradient_monotone(self):
        p = ParamSet.from_arrays({"w": np.array([1.0, 1.0])})
        st = AdamState.for_params(p)
        g = ParamSet.from_arrays({"w": np.array([2.0, -0.5])})
        trace = []
        for _ in range(100):
            adam_step(st, p, g)
            trace.append(p.flat.copy())
        trace = np.array(trace)
        assert np.all(np.diff(trace[:, 0]) < 0)
        assert np.all(np.diff(trace[:, 1]) > 0)

    def test_shape_mismatch(self):
        p = ParamSet.from_arrays({"w": np.zeros(2)})
        with pytest.raises(DimensionError):
            adam_step(AdamState.for_params(p), p, ParamSet.from_arrays({"w": np.zeros(3)}))


class TestGaussianNLL:
    def test_exact_fit_unit_variance(self):
        v = gaussian_nll(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        assert float(v) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)
        assert float(v) == pytest.approx(0.918938533204672, abs=1e-12)

    def test_unit_offset(self):
        v = gaussian_nll(np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        assert float(v) == pytest.approx(0.5 * (1 + math.log(2 * math.pi)), abs=1e-15)

    def test_matches_scalar_loop(self, rng):
        m, lv, t = rng.normal(size=(3, 7, 4))
        ref = 0.0
        for i in range(7):
            ref += 0.5 * sum((t[i, d] - m[i, d]) ** 2 * math.exp(-lv[i, d]) + lv[i, d]
                             + math.log(2 * math.pi) for d in range(4))
        assert float(gaussian_nll(m, lv, t)) == pytest.approx(ref / 7, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            gaussian_nll(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


class TestSquashedGaussian:
    def test_origin(self):
        logstd = np.array([[0.3, -1.2]])
        a, lp = squashed_gaussian_sample(np.zeros((1, 2)), logstd, np.zeros((1, 2)))
        np.testing.assert_array_equal(a, 0.0)
        assert lp[0] == pytest.approx(np.sum(-logstd - 0.5 * math.log(2 * math.pi)), abs=1e-14)

    def test_density_matches_monte_carlo(self):
        mean, logstd, noise = 0.3, -0.4, 0.7
        _, lp = squashed_gaussian_sample(np.array([[mean]]), np.array([[logstd]]), np.array([[noise]]))
        a0 = math.tanh(mean + math.exp(logstd) * noise)
        n = 10 ** 6
        draws = np.tanh(mean + math.exp(logstd) * np.random.default_rng(3).standard_normal(n))
        width = 0.01
        frac = np.mean(np.abs(draws - a0) < width / 2)
        est = frac / width
        se = math.sqrt(frac * (1 - frac) / n) / width
        assert abs(math.exp(lp[0]) - est) <= 3 * se

    def test_actions_strictly_inside(self):
        rng = np.random.default_rng(11)
        mean = rng.normal(scale=3, size=(10 ** 5, 1))
        logstd = rng.uniform(-20, 2, size=(10 ** 5, 1))
        a, lp = squashed_gaussian_sample(mean, logstd, rng.standard_normal((10 ** 5, 1)))
        assert np.all(np.abs(a) < 1.0)
        assert np.all(np.isfinite(lp))


class TestParamSet:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        p = make_mlp([3, 4, 2], rng, members=3, layernorm=True)
        p["W0"][0, 0, 0] = np.nextafter(1.0, 2.0)
        save_params(tmp_path / "p.dynl", p)
        q = load_params(tmp_path / "p.dynl")
        assert q.layout == p.layout
        assert q.flat.tobytes() == p.flat.tobytes()

    def test_header(self, rng):
        raw = dumps({"x": np.arange(3.0)})
        assert raw[:4] == b"DYNL"
        assert int.from_bytes(raw[4:8], "little") == 1
        np.testing.assert_array_equal(loads(raw)["x"], np.arange(3.0))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            loads(b"XXXX\x01\x00\x00\x00")

    def test_polyak(self, rng):
        t = ParamSet.from_arrays({"w": rng.normal(size=10)})
        o = ParamSet.from_arrays({"w": rng.normal(size=10)})
        expect = 0.995 * t.flat + 0.005 * o.flat
        polyak_update(t, o, 0.995)
        np.testing.assert_allclose(t.flat, expect, rtol=0, atol=1e-12)

    def test_duplicate_names(self):
        with pytest.raises(ValueError):
            ParamSet([("a", (1,)), ("a", (2,))])


class TestFusedKernels:
    """The tape-free kernels against the recorded ops."""

    @pytest.mark.parametrize("activation", ["relu", "swish", "tanh"])
    @pytest.mark.parametrize("layernorm", [False, True])
    @pytest.mark.parametrize("members", [None, 3])
    def test_matches_tape(self, activation, layernorm, members):
        from dynalab.diffmath.fused import MLPCache, mlp_backward, mlp_forward

        rng = np.random.default_rng(21)
        p = make_mlp([4, 7, 6, 2], rng, members=members, layernorm=layernorm)
        if layernorm:
            p.flat[...] += rng.normal(scale=0.1, size=p.flat.size)
        x = rng.normal(size=(9, 4))
        upstream = rng.normal(size=(9, 2) if members is None else (members, 9, 2))

        tape = Tape()
        out = forward_mlp(tape.watch(p), x, activation, layernorm)
        ref = backward(tape, T.sum(T.mul(out, upstream)))

        cache = MLPCache()
        fast_out = mlp_forward(p, x, activation, layernorm, cache=cache)
        grads = p.zeros_like()
        gx = mlp_backward(p, cache, upstream, activation, layernorm, grads=grads, need_input=True)
        # swish takes the logistic through tanh on the fast path: equal to rounding
        np.testing.assert_allclose(fast_out, out.value, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(grads.flat, ref.flat, rtol=1e-10, atol=1e-13)
        # input gradient by finite differences
        fd = fd_gradient(lambda: np.sum(mlp_forward(p, x, activation, layernorm) * upstream),
                         x.reshape(-1))
        assert max_rel_err(gx.reshape(-1), fd) < 1e-4

    def test_width_mismatch(self):
        from dynalab.diffmath.fused import mlp_forward

        p = make_mlp([4, 3, 1], np.random.default_rng(0))
        with pytest.raises(DimensionError, match="W0"):
            mlp_forward(p, np.zeros((2, 5)))
