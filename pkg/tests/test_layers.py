import numpy as np
import pytest

import latentpoints.nn.tensor as T
from latentpoints.nn import (
    Adam,
    AdaptiveGroupNorm,
    Dropout,
    EmaState,
    GroupNorm,
    Linear,
    Parameter,
    ResSEBlock,
    SinusoidalEmbedding,
    Tensor,
)

from fdcheck import check_grad, check_param_grads


class TestGroupNorm:
    def test_constant_input_per_group_gives_zeros(self):
        x = Tensor(np.full((3, 8), 2.5))
        out = T.group_norm(x, groups=2)
        np.testing.assert_allclose(out.values, 0.0)

    def test_already_normalized_pair(self):
        x = Tensor([[1.0, -1.0]])
        out = T.group_norm(x, groups=1)
        np.testing.assert_allclose(out.values, [[1.0, -1.0]] / np.sqrt(1 + 1e-5))

    def test_per_group_statistics(self):
        # scale >> sqrt(eps) so the 1e-5 stabilizer stays below the tolerance
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(16, 32)) * 100.0 + 40.0)
        out = T.group_norm(x, groups=2).values.reshape(16, 2, 16)
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    def test_shift_invariance_per_group(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 8))
        shifted = x + np.repeat(rng.normal(size=(4, 2)), 4, axis=1)
        a = T.group_norm(Tensor(x), groups=2).values
        b = T.group_norm(Tensor(shifted), groups=2).values
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_indivisible_channels_rejected(self):
        with pytest.raises(Exception):
            T.group_norm(Tensor(np.ones((2, 6))), groups=4)


class TestAdaptiveGroupNorm:
    def test_fresh_layer_is_plain_group_norm(self):
        rng = np.random.default_rng(2)
        agn = AdaptiveGroupNorm(16, cond_dim=8, rng=rng)
        x = Tensor(rng.normal(size=(4, 16)))
        cond = Tensor(np.eye(4, 8))  # unit-bounded conditioning
        gn = T.group_norm(x, groups=8).values
        sb = agn.cond_map(cond).values
        gamma, beta = sb[:, :16], sb[:, 16:]
        assert np.abs(gamma - 1.0).max() < 0.1  # 0.1-scaled cond weights
        assert np.abs(beta).max() < 0.1
        assert np.abs(agn(x, cond).values - gn).max() < 0.5
        agn.cond_map.weight.values[:] = 0.0
        out0 = agn(x, Tensor(np.zeros((4, 8)))).values
        np.testing.assert_array_equal(out0, gn)

    def test_gradient_wrt_cond_matches_fd(self):
        rng = np.random.default_rng(3)
        agn = AdaptiveGroupNorm(8, cond_dim=4, rng=rng)
        x_fixed = rng.normal(size=(3, 8))
        probe = rng.normal(size=(3, 8))

        def loss(cond):
            return (agn(Tensor(x_fixed), cond) * Tensor(probe)).sum()

        check_grad(loss, rng.normal(size=(3, 4)), step=1e-6, tol=1e-4)

    def test_cond_width_mismatch(self):
        rng = np.random.default_rng(4)
        agn = AdaptiveGroupNorm(8, cond_dim=4, rng=rng)
        with pytest.raises(Exception):
            agn(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 5))))

    def test_broadcast_over_points(self):
        rng = np.random.default_rng(5)
        agn = AdaptiveGroupNorm(8, cond_dim=4, rng=rng)
        x = Tensor(rng.normal(size=(2, 5, 8)))
        cond = Tensor(rng.normal(size=(2, 4)))
        assert agn(x, cond).shape == (2, 5, 8)


class TestSinusoidalEmbedding:
    def test_t_zero(self):
        emb = SinusoidalEmbedding(128)
        e = emb(0).values[0]
        np.testing.assert_allclose(e[0::2], 0.0)
        np.testing.assert_allclose(e[1::2], 1.0)
        assert np.dot(e, e) == pytest.approx(64.0)

    def test_injective_over_training_range(self):
        emb = SinusoidalEmbedding(64)
        e = emb(np.arange(1, 1001)).values
        assert len(np.unique(e.round(12), axis=0)) == 1000

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            SinusoidalEmbedding(63)

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            SinusoidalEmbedding(8)(-1)


class TestResSE:
    def test_zeroed_second_layer_is_identity(self):
        rng = np.random.default_rng(6)
        block = ResSEBlock(16, rng)
        block.lin2.weight.values[:] = 0.0
        block.lin2.bias.values[:] = 0.0
        x = rng.normal(size=(5, 16))
        np.testing.assert_array_equal(block(Tensor(x)).values, x)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(7)
        block = ResSEBlock(8, rng)
        x_fixed = rng.normal(size=(3, 8))
        probe = rng.normal(size=(3, 8))
        check_param_grads(
            lambda: (block(Tensor(x_fixed)) * Tensor(probe)).sum(),
            block.parameters(),
            step=1e-6,
        )


class TestLinearLayer:
    def test_gradients_match_fd(self):
        rng = np.random.default_rng(8)
        lin = Linear(6, 4, rng)
        x_fixed = rng.normal(size=(5, 6))
        check_param_grads(
            lambda: (lin(Tensor(x_fixed)) ** 2).sum(),
            lin.parameters(),
            step=1e-6,
        )

    def test_width_mismatch_raises(self):
        rng = np.random.default_rng(9)
        lin = Linear(6, 4, rng)
        with pytest.raises(Exception):
            lin(Tensor(np.ones((2, 5))))


class TestAdam:
    def test_zero_gradient_no_motion(self):
        p = Parameter([1.0, -2.0])
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_allclose(p.values, [1.0, -2.0])

    def test_first_step_is_lr_sized(self):
        p = Parameter([0.0])
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert p.values[0] == pytest.approx(-0.1, rel=1e-6)

    def test_decoupled_weight_decay(self):
        p = Parameter([2.0])
        opt = Adam([p], lr=0.1, weight_decay=3e-4)
        p.grad = np.array([0.0])
        opt.step()
        assert p.values[0] == pytest.approx(2.0 * (1 - 0.1 * 3e-4))

    def test_missing_grad_raises(self):
        p = Parameter([1.0])
        opt = Adam([p], lr=0.1)
        with pytest.raises(RuntimeError):
            opt.step()


class TestEma:
    def test_fixed_point(self):
        p = Parameter([3.0])
        ema = EmaState([p])
        ema.update([p])
        np.testing.assert_allclose(ema.shadow[0], [3.0])

    def test_single_step_from_zero(self):
        p = Parameter([1.0])
        ema = EmaState([p])
        ema.shadow[0] = np.zeros(1)
        ema.update([p])
        assert ema.shadow[0][0] == pytest.approx(1e-4)

    @pytest.mark.parametrize("k", [1, 10, 250])
    def test_geometric_series_closed_form(self, k):
        p = Parameter([0.7])
        ema = EmaState([p])
        ema.shadow[0] = np.zeros(1)
        for _ in range(k):
            ema.update([p])
        expected = 0.7 * (1.0 - 0.9999 ** k)
        assert ema.shadow[0][0] == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        p = Parameter([1.0])
        ema = EmaState([p])
        ema.shadow[0] = np.zeros(2)
        with pytest.raises(ValueError):
            ema.update([p])


class TestDropout:
    def test_eval_mode_is_identity(self):
        d = Dropout(0.5)
        x = Tensor(np.ones((4, 4)))
        assert d(x) is x

    def test_training_mask_deterministic_per_seed(self):
        x = Tensor(np.ones((32, 32)))
        outs = []
        for _ in range(2):
            d = Dropout(0.3)
            d.training = True
            d.rng = np.random.default_rng(42)
            outs.append(d(x).values)
        np.testing.assert_array_equal(outs[0], outs[1])
        kept = outs[0] != 0.0
        np.testing.assert_allclose(outs[0][kept], 1.0 / 0.7)
