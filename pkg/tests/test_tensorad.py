import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coupledcast import tensorad as ta


def rand(*shape, seed=0, grad=True):
    return ta.Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=grad)


class TestForward:
    def test_examples(self):
        a = rand(3, 4, grad=False)
        eye = ta.tensor(np.eye(3))
        assert np.array_equal(ta.matmul(eye, a).data, a.data)
        assert np.allclose(ta.softmax(ta.tensor(np.full(5, 2.5))).data, 0.2, atol=1e-15)
        mu, ls = rand(2, 3, seed=1), rand(2, 3, seed=2)
        assert np.array_equal(ta.gaussian_reparam(mu, ls, np.zeros((2, 3))).data, mu.data)

    def test_softmax_simplex(self):
        x = rand(4, 7, seed=3, grad=False)
        s = ta.softmax(ta.scale(x, 30.0), axis=-1).data
        assert np.all(s > 0) and np.max(np.abs(s.sum(axis=-1) - 1)) < 1e-12

    def test_shape_errors_name_op(self):
        with pytest.raises(ta.ShapeError, match="matmul"):
            ta.matmul(rand(2, 3), rand(2, 3))
        with pytest.raises(ta.ShapeError, match="add"):
            ta.add(rand(2, 3), rand(3))
        with pytest.raises(ta.ShapeError, match="split"):
            ta.split(rand(2, 4), [1, 2])

    def test_attention_matches_reference(self):
        rng = np.random.default_rng(4)
        q, k, v = (rng.normal(size=(2, 5, 6)) for _ in range(3))
        out = ta.scaled_dot_product_attention(ta.tensor(q), ta.tensor(k), ta.tensor(v), 2).data
        ref = np.empty_like(q)
        for h in range(2):
            sl = slice(3 * h, 3 * h + 3)
            s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / np.sqrt(3)
            p = np.exp(s - s.max(-1, keepdims=True))
            p /= p.sum(-1, keepdims=True)
            ref[..., sl] = p @ v[..., sl]
        assert np.max(np.abs(out - ref)) < 1e-12


class TestBackward:
    def test_sum_and_mse(self):
        x = rand(3, 4)
        ta.total(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))
        x.zero_grad()
        ta.mse_loss(x, np.zeros((3, 4))).backward()
        assert np.allclose(x.grad, 2 * x.data / 12, atol=1e-15)

    def test_non_scalar(self):
        with pytest.raises(ta.ShapeError):
            rand(2).backward()

    def test_repeatable(self):
        x, w = rand(4, 3, seed=5), rand(3, 2, seed=6)
        grads = []
        for _ in range(2):
            x.zero_grad()
            w.zero_grad()
            ta.mean(ta.gelu(ta.matmul(x, w))).backward()
            grads.append((x.grad.copy(), w.grad.copy()))
        assert all(np.array_equal(a, b) for a, b in zip(grads[0], grads[1]))

    def test_concat_split_routes_gradients(self):
        a, o = rand(2, 3, seed=7), rand(2, 3, seed=8)
        left, right = ta.split(ta.concat([a, o], axis=-1), [3, 3], axis=-1)
        assert np.array_equal(left.data, a.data) and np.array_equal(right.data, o.data)
        ta.total(ta.square(left)).backward()
        assert np.allclose(a.grad, 2 * a.data) and (o.grad is None or not o.grad.any())

    def test_shared_node_accumulates(self):
        x = rand(3, seed=9)
        ta.total(ta.mul(x, x)).backward()
        assert np.allclose(x.grad, 2 * x.data)


class TestGradcheck:
    def test_layer_ops(self):
        x = rand(2, 3, 4, seed=10)
        g, b = rand(4, seed=11), rand(4, seed=12)
        W, c = rand(4, 8, seed=13), rand(8, seed=14)

        def fn(x, g, b, W, c):
            h = ta.layer_norm(x, g, b)
            q, k, v = ta.split(ta.linear(h, W, c), [4, 2, 2], axis=-1)
            q = ta.reshape(ta.mean(ta.reshape(q, (2, 3, 2, 2)), axis=-1), (2, 3, 2))
            att = ta.scaled_dot_product_attention(q, k, v, 2)
            return ta.mse_loss(ta.gelu(att), np.ones((2, 3, 2)))

        assert ta.gradcheck(fn, [x, g, b, W, c]) < 1e-5

    def test_softmax_reparam(self):
        mu, ls, eps = rand(3, 4, seed=15), rand(3, 4, seed=16), rand(3, 4, seed=17)

        def fn(mu, ls, eps):
            z = ta.gaussian_reparam(mu, ta.scale(ls, 0.3), eps)
            return ta.total(ta.mul(ta.softmax(z, axis=0), ta.exp(ta.scale(z, 0.2))))

        assert ta.gradcheck(fn, [mu, ls, eps]) < 1e-5

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(2, 4))
    def test_random_compositions(self, seed, rows, cols):
        a, w = rand(rows, cols, seed=seed), rand(cols, cols, seed=seed + 1)

        def fn(a, w):
            h = ta.gelu(ta.matmul(a, w))
            h = ta.concat([h, ta.softmax(h, axis=-1)], axis=-1)
            return ta.mean(ta.mul(h, h))

        assert ta.gradcheck(fn, [a, w]) < 1e-5


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        arrays = {"a.W": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5), "név": np.ones(4)}
        ta.save_checkpoint(tmp_path / "m.ckpt", arrays)
        back = ta.load_checkpoint(tmp_path / "m.ckpt")
        assert list(back) == list(arrays)
        assert all(np.array_equal(back[k], v) for k, v in arrays.items())
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == b"CKPT" and int.from_bytes(raw[4:8], "little") == 3

    def test_errors(self, tmp_path):
        ta.save_checkpoint(tmp_path / "m.ckpt", {"x": np.ones(3)})
        raw = (tmp_path / "m.ckpt").read_bytes()
        for bad, msg in ((b"XXXX" + raw[4:], "magic"), (raw[:-4], "truncated"), (raw + b"\0", "trailing")):
            (tmp_path / "b.ckpt").write_bytes(bad)
            with pytest.raises(ta.CheckpointError, match=msg):
                ta.load_checkpoint(tmp_path / "b.ckpt")
