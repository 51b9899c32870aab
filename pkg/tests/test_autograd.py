import numpy as np
import pytest

from tokentraj import autograd as ag
from tokentraj.errors import ConfigError, ShapeError, UsageError
from tokentraj.nn import ParamStore, mlp_forward, multi_head_attention, pair_attention
from tokentraj.numdiff import check_gradients


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(4, 4))
        out = ag.matmul(ag.Tensor(np.eye(4)), ag.Tensor(x))
        assert np.allclose(out.data, x)

    def test_hand_case(self):
        out = ag.matmul(ag.Tensor([[1.0, 2.0], [3.0, 4.0]]), ag.Tensor([[1.0], [1.0]]))
        assert np.allclose(out.data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ag.matmul(ag.Tensor(np.zeros((2, 3))), ag.Tensor(np.zeros((2, 3))))

    def test_gradient(self, rng):
        a = ag.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = ag.Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def loss():
            return ag.mean_all(ag.mul(ag.matmul(a, b), ag.matmul(a, b)))

        assert check_gradients(loss, [a, b], rng, probes_per_tensor=6, rel_tol=1e-6) < 1e-6

    def test_batched_gradient(self, rng):
        a = ag.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = ag.Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)

        def loss():
            return ag.mean_all(ag.smooth_l1(ag.matmul(a, b)))

        assert check_gradients(loss, [a, b], rng, probes_per_tensor=6) < 1e-4


class TestSoftmax:
    def test_constant_row_uniform(self):
        out = ag.softmax(ag.Tensor(np.full((3, 5), 2.0)))
        assert np.allclose(out.data, 0.2)

    def test_hand_case(self):
        out = ag.softmax(ag.Tensor([0.0, np.log(3.0)]))
        assert np.allclose(out.data, [0.25, 0.75])

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(4, 6))
        a = ag.softmax(ag.Tensor(x)).data
        b = ag.softmax(ag.Tensor(x + 123.456)).data
        assert np.allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = ag.softmax(ag.Tensor(rng.normal(size=(7, 9)) * 30))
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_rows_exactly_zero(self, rng):
        x = rng.normal(size=(4, 6))
        mask = rng.random((4, 6)) > 0.4
        mask[0] = False  # fully-masked row
        mask[1, 0] = True
        out = ag.masked_softmax(ag.Tensor(x), mask)
        assert np.all(out.data[~mask] == 0.0)
        assert np.allclose(out.data[0], 0.0)
        sums = out.data.sum(axis=-1)
        assert np.allclose(sums[1:], 1.0, atol=1e-12)

    def test_gradient(self, rng):
        x = ag.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = ag.Tensor(rng.normal(size=(3, 5)))

        def loss():
            return ag.mean_all(ag.mul(ag.softmax(x), w))

        assert check_gradients(loss, [x], rng, probes_per_tensor=8, rel_tol=1e-5) < 1e-5


class TestLayerNorm:
    def test_constant_row_zero(self):
        g = ag.Tensor(np.ones(4))
        b = ag.Tensor(np.zeros(4))
        out = ag.layer_norm(ag.Tensor(np.full((2, 4), 3.0)), g, b)
        assert np.allclose(out.data, 0.0)

    def test_hand_case(self):
        g = ag.Tensor(np.ones(2))
        b = ag.Tensor(np.zeros(2))
        out = ag.layer_norm(ag.Tensor([[1.0, 3.0]]), g, b)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-2)

    def test_gradient(self, rng):
        x = ag.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        g = ag.Tensor(rng.normal(size=6), requires_grad=True)
        b = ag.Tensor(rng.normal(size=6), requires_grad=True)
        w = ag.Tensor(rng.normal(size=(4, 6)))

        def loss():
            return ag.mean_all(ag.mul(ag.layer_norm(x, g, b), w))

        assert check_gradients(loss, [x, g, b], rng, probes_per_tensor=6, rel_tol=1e-5) < 1e-5


class TestMlp:
    def test_zero_weights_zero_output(self, rng):
        store = ParamStore(rng)
        layers = store.mlp("m", [3, 5, 2])
        for layer in layers:
            layer.w.data[:] = 0.0
        out = mlp_forward(ag.Tensor(rng.normal(size=(4, 3))), layers)
        assert np.allclose(out.data, 0.0)

    def test_identity_single_layer(self, rng):
        store = ParamStore(rng)
        layers = store.mlp("m", [4, 4])
        layers[0].w.data = np.eye(4)
        layers[0].b.data[:] = 0.0
        x = rng.normal(size=(3, 4))
        assert np.allclose(mlp_forward(ag.Tensor(x), layers).data, x)

    def test_width_mismatch(self, rng):
        store = ParamStore(rng)
        layers = store.mlp("m", [3, 5, 2])
        with pytest.raises(ShapeError):
            mlp_forward(ag.Tensor(np.zeros((4, 7))), layers)

    def test_gradient(self, rng):
        store = ParamStore(rng)
        layers = store.mlp("m", [3, 8, 8, 2])
        x = ag.Tensor(rng.normal(size=(5, 3)), requires_grad=True)

        def loss():
            return ag.mean_all(ag.smooth_l1(mlp_forward(x, layers)))

        tensors = [x] + [l.w for l in layers] + [l.b for l in layers]
        assert check_gradients(loss, tensors, rng, probes_per_tensor=4, rel_tol=1e-5) < 1e-5


class TestAttention:
    def _weights(self, rng, d_in=6, d_model=8, d_out=6):
        store = ParamStore(rng)
        return (
            store.linear("wq", d_in, d_model),
            store.linear("wk", d_in, d_model),
            store.linear("wv", d_in, d_model),
            store.linear("wo", d_model, d_out, bias=False),
        )

    def test_single_key_returns_projected_value(self, rng):
        wq, wk, wv, wo = self._weights(rng)
        q = ag.Tensor(rng.normal(size=(3, 6)))
        kv = ag.Tensor(rng.normal(size=(1, 6)))
        out = multi_head_attention(q, kv, kv, wq, wk, wv, wo, num_heads=2)
        expected = wo(wv(kv)).data
        assert np.allclose(out.data, np.repeat(expected, 3, axis=0))

    def test_identity_mask_attends_to_self(self, rng):
        wq, wk, wv, wo = self._weights(rng)
        x = ag.Tensor(rng.normal(size=(4, 6)))
        out = multi_head_attention(x, x, x, wq, wk, wv, wo, num_heads=2, mask=np.eye(4, dtype=bool))
        expected = wo(wv(x)).data
        assert np.allclose(out.data, expected)

    def test_fully_masked_rows_output_zero(self, rng):
        wq, wk, wv, wo = self._weights(rng)
        x = ag.Tensor(rng.normal(size=(4, 6)))
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, :] = True
        out = multi_head_attention(x, x, x, wq, wk, wv, wo, num_heads=2, mask=mask)
        assert np.all(out.data[1:] == 0.0)

    def test_indivisible_heads_rejected(self, rng):
        wq, wk, wv, wo = self._weights(rng)
        x = ag.Tensor(rng.normal(size=(4, 6)))
        with pytest.raises(ConfigError):
            multi_head_attention(x, x, x, wq, wk, wv, wo, num_heads=3)

    def test_gradient_through_qkv(self, rng):
        wq, wk, wv, wo = self._weights(rng)
        q = ag.Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        k = ag.Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        v = ag.Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        mask = np.tril(np.ones((3, 5), dtype=bool))

        def loss():
            out = multi_head_attention(q, k, v, wq, wk, wv, wo, num_heads=2, mask=mask)
            return ag.mean_all(ag.mul(out, out))

        assert check_gradients(loss, [q, k, v], rng, probes_per_tensor=8) < 1e-4

    def test_pair_attention_gradient(self, rng):
        wq, wk, wv, wo = self._weights(rng)
        q_in = ag.Tensor(rng.normal(size=(2, 3, 4, 6)), requires_grad=True)
        k_in = ag.Tensor(rng.normal(size=(2, 3, 4, 6)), requires_grad=True)
        mask = rng.random((2, 3, 4)) > 0.3
        mask[..., 0] = True

        def loss():
            out = pair_attention(q_in, k_in, k_in, wq, wk, wv, wo, num_heads=2, mask=mask)
            return ag.mean_all(ag.mul(out, out))

        assert check_gradients(loss, [q_in, k_in, wq.w, wo.w], rng, probes_per_tensor=6) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = ag.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        ag.sum_axis(x).backward()
        assert np.allclose(x.grad, 1.0)

    def test_product_of_scalars(self):
        x = ag.Tensor(3.0, requires_grad=True)
        y = ag.Tensor(5.0, requires_grad=True)
        ag.mul(x, y).backward()
        assert x.grad == pytest.approx(5.0)
        assert y.grad == pytest.approx(3.0)

    def test_non_scalar_rejected(self, rng):
        x = ag.Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(UsageError):
            x.backward()

    def test_repeat_backward_accumulates(self):
        x = ag.Tensor(2.0, requires_grad=True)
        loss = ag.mul(x, x)
        loss.backward()
        first = float(x.grad)
        loss.backward()
        assert float(x.grad) == pytest.approx(2 * first)

    def test_fanout_accumulation(self):
        x = ag.Tensor(3.0, requires_grad=True)
        y = ag.add(ag.mul(x, x), ag.mul(x, 2.0))  # x^2 + 2x
        y.backward()
        assert float(x.grad) == pytest.approx(2 * 3.0 + 2.0)


class TestDeterminism:
    def test_bit_identical_reruns(self, rng):
        store = ParamStore(np.random.default_rng(7))
        layers = store.mlp("m", [4, 16, 4])
        x = rng.normal(size=(6, 4))

        def run():
            out = mlp_forward(ag.Tensor(x), layers)
            out = ag.softmax(out)
            return out.data.copy()

        assert np.array_equal(run(), run())


class TestMisc:
    def test_rope_odd_dim_rejected(self, rng):
        with pytest.raises(ConfigError):
            ag.rope_rotate(ag.Tensor(rng.normal(size=(2, 3))), np.zeros(2))

    def test_rope_position_zero_identity(self, rng):
        x = rng.normal(size=(3, 8))
        out = ag.rope_rotate(ag.Tensor(x), np.zeros(3))
        assert np.allclose(out.data, x)

    def test_rope_hand_rotation(self):
        out = ag.rope_rotate(ag.Tensor([[1.0, 0.0]]), np.array([1.0]))
        assert np.allclose(out.data, [[np.cos(1.0), np.sin(1.0)]])

    def test_rope_gradient(self, rng):
        x = ag.Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        pos = np.arange(4, dtype=np.float64)
        w = rng.normal(size=(4, 8))

        def loss():
            return ag.mean_all(ag.mul(ag.rope_rotate(x, pos), ag.Tensor(w)))

        assert check_gradients(loss, [x], rng, probes_per_tensor=8, rel_tol=1e-6) < 1e-6

    def test_max_pool_duplicate_invariance(self, rng):
        x = rng.normal(size=(5, 3))
        dup = np.concatenate([x, x[2:3]], axis=0)
        a = ag.max_axis(ag.Tensor(x[None]), axis=1).data
        b = ag.max_axis(ag.Tensor(dup[None]), axis=1).data
        assert np.array_equal(a, b)

    def test_gather_and_expand_gradients(self, rng):
        table = ag.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        idx = np.array([0, 2, 2, 5])
        w = rng.normal(size=(3, 4, 4))

        def loss():
            rows = ag.gather(table, idx)
            tiled = ag.expand(ag.reshape(rows, (1, 4, 4)), 0, 3)
            return ag.mean_all(ag.mul(tiled, ag.Tensor(w)))

        assert check_gradients(loss, [table], rng, probes_per_tensor=8, rel_tol=1e-6) < 1e-6

    def test_dropout_inverted_scaling(self, rng):
        x = ag.Tensor(np.ones((1000, 4)), requires_grad=True)
        out = ag.dropout(x, 0.25, np.random.default_rng(0))
        kept = out.data != 0.0
        assert np.allclose(out.data[kept], 1.0 / 0.75)
        assert abs(kept.mean() - 0.75) < 0.05

    def test_smooth_l1_regions(self):
        x = ag.Tensor([0.5, -0.5, 3.0, -3.0])
        out = ag.smooth_l1(x, 1.0)
        assert np.allclose(out.data, [0.125, 0.125, 2.5, 2.5])

    def test_concat_slice_roundtrip_gradients(self, rng):
        a = ag.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = ag.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = rng.normal(size=(2, 4))

        def loss():
            joined = ag.concat([a, b], 0)
            return ag.mean_all(ag.mul(ag.slice_axis(joined, 0, 2, 4), ag.Tensor(w)))

        assert check_gradients(loss, [a, b], rng, probes_per_tensor=6, rel_tol=1e-6) < 1e-6
