import numpy as np
import pytest

from amd.ndgrad import (
    OP_NAMES,
    Graph,
    NumericError,
    ShapeError,
    UsageError,
    backward,
    evaluate,
    grad_check,
    load_params,
    save_params,
)


def _rand(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


# Each builder returns (graph, params) with a single output "y"; operands are
# parameters so grad_check covers them.
def _unary(op, lo=-2.0, hi=2.0):
    def build(rng):
        g = Graph()
        a = g.param("a", (3, 4))
        g.output("y", getattr(g, op)(a))
        return g, {"a": _rand(rng, (3, 4), lo, hi)}
    return build


def _binary(op, lo_b=-2.0, hi_b=2.0):
    def build(rng):
        g = Graph()
        a = g.param("a", (2, 3))
        b = g.param("b", (2, 3))
        g.output("y", getattr(g, op)(a, b))
        return g, {"a": _rand(rng, (2, 3)), "b": _rand(rng, (2, 3), lo_b, hi_b)}
    return build


def _matmul_weight(rng):
    g = Graph()
    a = g.param("a", (2, 3, 4))
    w = g.param("w", (4, 5))
    g.output("y", g.matmul(a, w))
    return g, {"a": _rand(rng, (2, 3, 4)), "w": _rand(rng, (4, 5))}


def _matmul_batched(rng):
    g = Graph()
    a = g.param("a", (2, 3, 4))
    b = g.param("b", (2, 4, 2))
    g.output("y", g.matmul(a, b))
    return g, {"a": _rand(rng, (2, 3, 4)), "b": _rand(rng, (2, 4, 2))}


def _matmul_vector(rng):
    g = Graph()
    a = g.param("a", (3,))
    w = g.param("w", (3, 2))
    g.output("y", g.matmul(a, w))
    return g, {"a": _rand(rng, (3,)), "w": _rand(rng, (3, 2))}


def _scale(rng):
    g = Graph()
    a = g.param("a", (4,))
    g.output("y", g.scale(a, -1.7))
    return g, {"a": _rand(rng, (4,))}


def _bias_add(rng):
    g = Graph()
    a = g.param("a", (2, 3, 4))
    b = g.param("b", (4,))
    g.output("y", g.bias_add(a, b))
    return g, {"a": _rand(rng, (2, 3, 4)), "b": _rand(rng, (4,))}


def _layer_norm(rng):
    g = Graph()
    a = g.param("a", (3, 5))
    gain = g.param("gain", (5,))
    bias = g.param("bias", (5,))
    g.output("y", g.layer_norm(a, gain, bias))
    return g, {"a": _rand(rng, (3, 5)), "gain": _rand(rng, (5,)), "bias": _rand(rng, (5,))}


def _concat(rng):
    g = Graph()
    a = g.param("a", (2, 3))
    b = g.param("b", (2, 1))
    g.output("y", g.concat([a, b, a], axis=1))
    return g, {"a": _rand(rng, (2, 3)), "b": _rand(rng, (2, 1))}


def _slice(rng):
    g = Graph()
    a = g.param("a", (3, 5, 2))
    g.output("y", g.slice(a, 1, 1, 4))
    return g, {"a": _rand(rng, (3, 5, 2))}


def _reshape_transpose(rng):
    g = Graph()
    a = g.param("a", (2, 3, 4))
    g.output("y", g.transpose(g.reshape(a, (6, 4)), (1, 0)))
    return g, {"a": _rand(rng, (2, 3, 4))}


def _tile(rng):
    g = Graph()
    a = g.param("a", (1, 2, 3))
    g.output("y", g.tile(a, (4, 1, 2)))
    return g, {"a": _rand(rng, (1, 2, 3))}


def _reduce(op, axis):
    def build(rng):
        g = Graph()
        a = g.param("a", (3, 4))
        g.output("y", getattr(g, op)(a, axis=axis))
        return g, {"a": _rand(rng, (3, 4))}
    return build


def _softmax_log(rng):
    g = Graph()
    a = g.param("a", (3, 4))
    g.output("y", g.reduce_sum(g.log(g.softmax(a))))
    return g, {"a": _rand(rng, (3, 4))}


OP_CASES = {
    "matmul-weight": _matmul_weight,
    "matmul-batched": _matmul_batched,
    "matmul-vector": _matmul_vector,
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div", 0.5, 2.0),
    "scale": _scale,
    "bias_add": _bias_add,
    "tanh": _unary("tanh"),
    "sigmoid": _unary("sigmoid"),
    "relu": _unary("relu"),
    "softplus": _unary("softplus"),
    "abs": _unary("abs"),
    "exp": _unary("exp"),
    "log": _unary("log", 0.2, 2.0),
    "softmax": _unary("softmax"),
    "l2_normalize": _unary("l2_normalize"),
    "layer_norm": _layer_norm,
    "concat": _concat,
    "slice": _slice,
    "reshape+transpose": _reshape_transpose,
    "tile": _tile,
    "reduce_sum-all": _reduce("reduce_sum", None),
    "reduce_sum-axis": _reduce("reduce_sum", 1),
    "reduce_mean-all": _reduce("reduce_mean", None),
    "reduce_mean-axis": _reduce("reduce_mean", 0),
    "softmax+log": _softmax_log,
}


def test_every_op_has_a_gradient_case():
    covered = {name.split("-")[0].split("+")[0] for name in OP_CASES}
    covered |= {"transpose", "log", "input", "param"}
    assert set(OP_NAMES) <= covered


@pytest.mark.parametrize("case", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradients_match_finite_differences(case, seed):
    g, params = OP_CASES[case](np.random.default_rng(seed))
    assert grad_check(g, {}, params, "y", step=1e-5) < 1e-4


class TestEvaluate:
    def test_identity_matmul(self):
        g = Graph()
        x = g.input("x", (2,))
        w = g.param("W", (2, 2))
        g.output("y", g.matmul(x, w))
        out = evaluate(g, {"x": [1.0, 2.0]}, {"W": np.eye(2)})
        np.testing.assert_array_equal(out["y"], [1.0, 2.0])

    def test_softmax_symmetric(self):
        g = Graph()
        x = g.input("x", (2,))
        g.output("y", g.softmax(x))
        np.testing.assert_array_equal(evaluate(g, {"x": [0.0, 0.0]})["y"], [0.5, 0.5])

    def test_softmax_stable_for_large_logits(self):
        g = Graph()
        x = g.input("x", (3,))
        g.output("y", g.softmax(x))
        y = evaluate(g, {"x": [1000.0, 1000.0, -1e9]})["y"]
        np.testing.assert_allclose(y, [0.5, 0.5, 0.0])

    def test_sum_of_squares(self):
        g = Graph()
        x = g.input("x", (3,))
        g.output("y", g.reduce_sum(g.mul(x, x)))
        assert evaluate(g, {"x": [1.0, 2.0, 3.0]})["y"] == 14.0

    def test_pure(self):
        g, params = _layer_norm(np.random.default_rng(5))
        a = evaluate(g, {}, params)["y"]
        b = evaluate(g, {}, params)["y"]
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch_names_node(self):
        g = Graph()
        g.input("x", (3,))
        with pytest.raises(ShapeError, match="'x'"):
            evaluate(g, {"x": np.zeros(4)}, outputs=[])

    def test_build_time_shape_error(self):
        g = Graph()
        a = g.input("a", (2, 3))
        b = g.input("b", (4, 2))
        with pytest.raises(ShapeError, match="matmul"):
            g.matmul(a, b)
        with pytest.raises(ShapeError, match="add"):
            g.add(a, b)

    def test_non_finite_names_node(self):
        g = Graph()
        x = g.input("x", (2,))
        g.output("y", g.log(x, name="logx"))
        with pytest.raises(NumericError, match="logx"):
            evaluate(g, {"x": [1.0, 0.0]})

    def test_unbound_input(self):
        g = Graph()
        x = g.input("x", (2,))
        g.output("y", g.exp(x))
        with pytest.raises(UsageError):
            evaluate(g, {})

    def test_staged_feeds(self):
        g = Graph()
        x = g.input("x", (2,))
        sel = g.input("sel", (2,))
        y = g.output("y", g.exp(x))
        g.output("z", g.reduce_sum(g.mul(y, sel)))
        tr = evaluate(g, {"x": [0.0, 1.0]}, outputs=["y"])
        pick = (tr["y"] == tr["y"].max()).astype(float)
        tr.extend({"sel": pick}, ["z"])
        assert tr["z"] == pytest.approx(np.e)


class TestBackward:
    def test_sum_of_squares_gradient(self):
        g = Graph()
        x = g.input("x", (3,))
        g.output("y", g.reduce_sum(g.mul(x, x)))
        grads = backward(evaluate(g, {"x": [1.0, 2.0, 3.0]}), {"y": 1.0}, with_inputs=True)
        np.testing.assert_array_equal(grads["x"], [2.0, 4.0, 6.0])

    def test_constant_output_gives_zero_gradients(self):
        g = Graph()
        x = g.input("x", (3,))
        g.param("w", (3,))
        g.output("y", g.reduce_sum(x))
        grads = backward(evaluate(g, {"x": [1.0, 2.0, 3.0]}, {"w": np.ones(3)}), {"y": 1.0})
        np.testing.assert_array_equal(grads["w"], np.zeros(3))

    def test_requires_trace(self):
        g = Graph()
        g.output("y", g.reduce_sum(g.param("w", (2,))))
        with pytest.raises(UsageError):
            backward(g, {"y": 1.0})

    def test_unevaluated_output(self):
        g = Graph()
        w = g.param("w", (2,))
        g.output("y", g.reduce_sum(w))
        g.output("z", g.reduce_mean(w))
        tr = evaluate(g, {}, {"w": np.ones(2)}, outputs=["y"])
        with pytest.raises(UsageError):
            backward(tr, {"z": 1.0})

    def test_seed_shape_checked(self):
        g = Graph()
        w = g.param("w", (2,))
        g.output("y", g.exp(w))
        tr = evaluate(g, {}, {"w": np.ones(2)})
        with pytest.raises(ShapeError):
            backward(tr, {"y": np.ones(3)})

    def test_fan_out_accumulates(self):
        g = Graph()
        w = g.param("w", (2,))
        g.output("y", g.reduce_sum(g.add(g.mul(w, w), w)))
        grads = backward(evaluate(g, {}, {"w": np.array([1.0, -3.0])}), {"y": 1.0})
        np.testing.assert_array_equal(grads["w"], [3.0, -5.0])

    def test_linearity(self):
        rng = np.random.default_rng(3)
        g = Graph()
        w = g.param("w", (3, 3))
        x = g.input("x", (2, 3))
        h = g.tanh(g.matmul(x, w))
        f1 = g.output("f1", g.reduce_sum(g.mul(h, h)))
        f2 = g.output("f2", g.reduce_mean(g.softmax(g.matmul(h, w))))
        g.output("f", g.add(f1, f2))
        params = {"w": rng.normal(size=(3, 3))}
        tr = evaluate(g, {"x": rng.normal(size=(2, 3))}, params)
        both = backward(tr, {"f": 1.0})["w"]
        sep = backward(tr, {"f1": 1.0})["w"] + backward(tr, {"f2": 1.0})["w"]
        np.testing.assert_allclose(both, sep, rtol=0, atol=1e-12)


def _mlp(rng, width=8, depth=2, din=3):
    g = Graph()
    x = g.input("x", (4, din))
    h = x
    params = {}
    for i in range(depth):
        fan_in = din if i == 0 else width
        w = g.param(f"w{i}", (fan_in, width))
        b = g.param(f"b{i}", (width,))
        h = g.tanh(g.bias_add(g.matmul(h, w), b))
        params[f"w{i}"] = rng.normal(scale=0.7, size=(fan_in, width))
        params[f"b{i}"] = rng.normal(scale=0.1, size=width)
    v = g.param("v", (width, 1))
    params["v"] = rng.normal(size=(width, 1))
    g.output("y", g.reduce_sum(g.matmul(h, v)))
    return g, {"x": rng.uniform(-2, 2, size=(4, din))}, params


class TestGradCheck:
    def test_linear_is_exact(self):
        g = Graph()
        x = g.input("x", (3,))
        w = g.param("w", (3,))
        g.output("y", g.reduce_sum(g.mul(w, x)))
        err = grad_check(g, {"x": [0.3, -1.2, 2.0]}, {"w": np.array([1.0, 2.0, -0.5])}, step=1e-3)
        assert err < 1e-10

    @pytest.mark.parametrize("seed", range(3))
    def test_mlp(self, seed):
        g, feeds, params = _mlp(np.random.default_rng(seed))
        assert grad_check(g, feeds, params, step=1e-5) < 1e-4

    def test_step_range(self):
        g, feeds, params = _mlp(np.random.default_rng(0))
        with pytest.raises(ValueError):
            grad_check(g, feeds, params, step=0.1)

    def test_detects_wrong_gradient(self, monkeypatch):
        from amd import ndgrad

        g, feeds, params = _mlp(np.random.default_rng(0))
        fwd, _ = ndgrad._OPS["tanh"]
        monkeypatch.setitem(ndgrad._OPS, "tanh", (fwd, lambda g_, xs, y, at, n: (g_ * (1.0 - y),)))
        assert grad_check(g, feeds, params, step=1e-5) > 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"enc.w": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(2.5)}
        path = tmp_path / "p.amdc"
        save_params(path, params)
        back = load_params(path)
        assert list(back) == list(params)
        for k in params:
            assert back[k].shape == params[k].shape
            np.testing.assert_array_equal(back[k], params[k])

    def test_header(self, tmp_path):
        path = tmp_path / "p.amdc"
        save_params(path, {"w": np.ones(2)})
        blob = path.read_bytes()
        assert blob[:4] == b"AMDC"
        assert int.from_bytes(blob[4:8], "little") == 1
        # name length, name, rank, extent, then two f64 values
        assert len(blob) == 8 + 4 + 1 + 4 + 8 + 16

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.amdc"
        path.write_bytes(b"XXXX\x01\x00\x00\x00")
        with pytest.raises(ValueError, match="not an AMDC"):
            load_params(path)
