import numpy as np
import pytest

from mambadesk.numerics import (
    ContractError,
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    checkpoint,
    ops,
)

from .conftest import central_diff, rel_err, tape_grad


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_zero(self):
        out = ops.matmul([[1.0, 0.0], [0.0, 1.0]], [[0.0], [0.0]])
        np.testing.assert_array_equal(out.data, [[0], [0]])

    def test_random_vs_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(ops.matmul(a, b).data, naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
            ops.matmul(np.ones((3, 4)), np.ones((3, 2)))

    def test_chained_products_associative(self, rng):
        a, b, c = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=(4, 2))
        left = ops.matmul(ops.matmul(a, b), c).data
        right = ops.matmul(a, ops.matmul(b, c)).data
        np.testing.assert_allclose(left, naive_matmul(naive_matmul(a, b), c), atol=1e-10)
        np.testing.assert_allclose(left, right, atol=1e-10)


class TestSoftplus:
    def test_zero_is_log2(self):
        assert ops.softplus(np.array(0.0)).item() == pytest.approx(0.6931471805599453, abs=1e-16)

    def test_saturates(self):
        assert abs(ops.softplus(np.array(100.0)).item() - 100.0) < 1e-12

    def test_negative_matches_extended_precision(self):
        # log(1 + exp(-3.7)) evaluated with mpmath at 50 digits
        assert ops.softplus(np.array(-3.7)).item() == pytest.approx(0.024422845933779159, rel=1e-15)

    def test_no_overflow(self):
        out = ops.softplus(np.array([-1000.0, 1000.0])).data
        assert out[0] == 0.0 and out[1] == 1000.0


class TestBackward:
    def test_linear_map_gradient(self, rng):
        W, x = rng.normal(size=(3, 4)), rng.normal(size=(4, 1))
        gW, _ = tape_grad(lambda w, v: ops.sum(ops.matmul(w, v)), W, x)
        np.testing.assert_allclose(gW, np.outer(np.ones(3), x[:, 0]))

    def test_softplus_at_zero(self):
        (g,) = tape_grad(lambda v: ops.sum(ops.softplus(v)), np.zeros(5))
        np.testing.assert_array_equal(g, 0.5)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.scale(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_unused_parameter_gradient_is_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.exp(x))
        g = tape.backward(loss)
        assert unused not in g
        np.testing.assert_array_equal(g[unused], np.zeros((2, 2)))

    def test_each_record_visited_once(self):
        x = Tensor(np.ones(3), requires_grad=True)
        calls = []
        with Tape() as tape:
            y = ops.exp(x)
            loss = ops.sum(ops.mul(y, y))
        for rec in tape.records:
            fn = rec.vjp
            rec.vjp = lambda g, fn=fn, name=rec.name: calls.append(name) or fn(g)
        tape.backward(loss)
        assert sorted(calls) == sorted(r.name for r in tape.records)

    def test_composed_graph_matches_finite_differences(self, rng):
        W1, W2 = rng.normal(size=(5, 4)), rng.normal(size=(3, 5))
        x = rng.normal(size=(6, 4))
        g_in = rng.normal(size=4)
        b_in = rng.normal(size=4)

        def f(w1, w2, xx, g, b):
            h = ops.silu(ops.linear(ops.layer_norm(xx, g, b), w1))
            return ops.sum(ops.softplus(ops.linear(h, w2)))

        grads = tape_grad(f, W1, W2, x, g_in, b_in)
        args = [W1, W2, x, g_in, b_in]
        for i, g in enumerate(grads):

            def scalar(a, i=i):
                vals = list(args)
                vals[i] = a
                return f(*[Tensor(v) for v in vals]).item()

            assert rel_err(g, central_diff(scalar, args[i])) < 1e-6

    def test_replay_is_bit_deterministic(self, rng):
        W, x = rng.normal(size=(4, 4)), rng.normal(size=(8, 4))

        def f(w, xx):
            return ops.mean(ops.softmax(ops.linear(xx, w)))

        g1 = tape_grad(f, W, x)
        g2 = tape_grad(f, W, x)
        for a, b in zip(g1, g2):
            assert a.tobytes() == b.tobytes()


def _gradcheck_unary(f, x, eps=1e-5):
    # weighted sum so that every output entry contributes differently
    shape = f(Tensor(x)).shape
    w = np.linspace(-1, 2, int(np.prod(shape))).reshape(shape)
    (g,) = tape_grad(lambda v: ops.sum(ops.mul(f(v), Tensor(w))), x)
    fd = central_diff(lambda a: float((f(Tensor(a)).data * w).sum()), x, eps)
    return rel_err(g, fd)


UNARY = {
    "softplus": ops.softplus,
    "sigmoid": ops.sigmoid,
    "silu": ops.silu,
    "exp": ops.exp,
    "softmax": lambda v: ops.softmax(v, axis=-1),
    "flip": lambda v: ops.flip(v, 1),
    "transpose": lambda v: ops.transpose(v, (1, 0)),
    "take": lambda v: ops.take(v, 1, 3, axis=1),
    "reshape": lambda v: ops.reshape(v, (12,)),
    "scale": lambda v: ops.scale(v, -2.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    x = rng.normal(size=(3, 4))
    assert _gradcheck_unary(UNARY[name], x) < 1e-6


BINARY = {
    "add": ops.add,
    "sub": ops.sub,
    "mul": ops.mul,
    "matmul": lambda a, b: ops.matmul(a, ops.transpose(b, (1, 0))),
    "linear": ops.linear,
    "add_broadcast_row": lambda a, b: ops.add(a, ops.take(b, 0, 1, axis=0)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name, rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    f = BINARY[name]
    w = rng.normal(size=f(Tensor(a), Tensor(b)).shape)
    ga, gb = tape_grad(lambda x, y: ops.sum(ops.mul(f(x, y), Tensor(w))), a, b)
    fa = central_diff(lambda v: float((f(Tensor(v), Tensor(b)).data * w).sum()), a)
    fb = central_diff(lambda v: float((f(Tensor(a), Tensor(v)).data * w).sum()), b)
    assert rel_err(ga, fa) < 1e-6
    assert rel_err(gb, fb) < 1e-6


def test_layer_norm_and_cross_entropy_gradients(rng):
    x = rng.normal(size=(2, 3, 5))
    gain, bias = rng.normal(size=5), rng.normal(size=5)
    targets = rng.integers(0, 5, size=(2, 3))

    def f(xx, g, b):
        return ops.cross_entropy(ops.layer_norm(xx, g, b), targets)

    grads = tape_grad(f, x, gain, bias)
    args = [x, gain, bias]
    for i, g in enumerate(grads):

        def scalar(a, i=i):
            vals = list(args)
            vals[i] = a
            return f(*[Tensor(v) for v in vals]).item()

        assert rel_err(g, central_diff(scalar, args[i])) < 1e-6


def test_embedding_gradient_accumulates_repeats():
    table = np.arange(12.0).reshape(4, 3)
    ids = np.array([[1, 1, 3]])
    (g,) = tape_grad(lambda t: ops.sum(ops.embedding(t, ids)), table)
    np.testing.assert_array_equal(g, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_is_an_error():
    with pytest.raises(NumericError, match="exp"):
        ops.exp(Tensor([1000.0]))


def test_tensor_shape_matches_data():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert int(np.prod(t.shape)) == t.data.size
    assert t.data.flags.c_contiguous
    with pytest.raises(ValueError):
        t.data[0, 0] = 1.0


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        tensors = {
            "w": rng.normal(size=(3, 4)),
            "scalar": np.array(2.5),
            "odd": np.array([-0.0, 5e-324, 1.7976931348623157e308, np.pi]),
            "ünïcode.name": rng.normal(size=(2, 1, 2)),
        }
        path = tmp_path / "t.ckpt"
        checkpoint.save(path, tensors, header="a=1\n")
        loaded, header = checkpoint.load(path)
        assert header == "a=1\n"
        assert list(loaded) == list(tensors)
        for k, v in tensors.items():
            assert loaded[k].shape == v.shape
            assert loaded[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "t.ckpt"
        checkpoint.save(path, {"ab": np.array([[1.0, 2.0]])})
        raw = path.read_bytes()
        expected = (
            b"MAMBADSK"
            + b"\x01"
            + (0).to_bytes(4, "little")
            + (2).to_bytes(4, "little")
            + b"ab"
            + (2).to_bytes(4, "little")
            + (1).to_bytes(8, "little")
            + (2).to_bytes(8, "little")
            + np.array([1.0, 2.0], dtype="<f8").tobytes()
        )
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOTACKPT\x01")
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.ckpt"
        checkpoint.save(path, {"w": np.ones(10)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(path)
