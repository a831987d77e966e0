import numpy as np
import pytest

from latentpoints.networks import (
    NetConfig,
    build_prior_nets,
    build_vae_nets,
)
from latentpoints.nn import Tensor

from fdcheck import check_param_grads


@pytest.fixture(scope="module")
def small_cfg():
    return NetConfig(d_z=16, d_h=1, enc_widths=(8, 16), point_widths=(16, 16, 16),
                     dec_widths=(16, 16, 16), prior_width=16, prior_blocks=2, h_prior_widths=(16, 16, 16, 16),
                     t_dim_z=16, t_dim_h=8, dropout=0.0)


@pytest.fixture(scope="module")
def nets(small_cfg):
    return build_vae_nets(small_cfg, seed=0)


def random_cloud(rng, b=2, n=12):
    return rng.normal(size=(b, n, 3)) * 0.5


class TestShapeEncoder:
    def test_permutation_invariance_bitwise(self, nets):
        enc, _, _ = nets
        rng = np.random.default_rng(0)
        x = random_cloud(rng)
        perm = rng.permutation(x.shape[1])
        mu1, ls1 = enc(Tensor(x))
        mu2, ls2 = enc(Tensor(x[:, perm]))
        np.testing.assert_array_equal(mu1.values, mu2.values)
        np.testing.assert_array_equal(ls1.values, ls2.values)

    def test_posterior_nearly_deterministic_at_init(self, nets):
        enc, _, _ = nets
        rng = np.random.default_rng(1)
        x = random_cloud(rng, b=4, n=32)
        _, log_std = enc(Tensor(x))
        assert log_std.values.max() <= -4.0  # raw bounded by 2, offset 6
        assert np.exp(log_std.values).max() <= np.exp(-4.0)

    def test_empty_cloud_rejected(self, nets):
        enc, _, _ = nets
        with pytest.raises(ValueError):
            enc(Tensor(np.zeros((1, 0, 3))))

    def test_kl_gradient_flows_to_encoder(self, small_cfg, nets):
        enc, _, _ = nets
        rng = np.random.default_rng(2)
        x = Tensor(random_cloud(rng, b=1, n=8))

        def loss():
            mu, log_std = enc(x)
            var = (log_std * 2.0).values
            import latentpoints.nn.tensor as T

            return (0.5 * (mu * mu + T.exp(log_std * 2.0) - 1.0 - log_std * 2.0)).sum()

        loss_t = loss()
        loss_t.backward()
        gnorm = sum(float(np.abs(p.grad).sum()) for p in enc.parameters() if p.grad is not None)
        enc.zero_grad()
        assert gnorm > 0.0


class TestPointEncoder:
    def test_zeroed_net_is_identity_with_zero_features(self, small_cfg):
        _, enc, _ = build_vae_nets(small_cfg, seed=3)
        enc.head.weight.values[:] = 0.0
        enc.head.bias.values[:] = 0.0
        rng = np.random.default_rng(3)
        x = random_cloud(rng)
        z = Tensor(rng.normal(size=(2, small_cfg.d_z)))
        mu, log_std = enc(Tensor(x), z)
        np.testing.assert_array_equal(mu.values[:, :, :3], x)
        np.testing.assert_array_equal(mu.values[:, :, 3:], 0.0)
        np.testing.assert_array_equal(log_std.values, -6.0)

    def test_permutation_equivariance(self, nets):
        _, enc, _ = nets
        rng = np.random.default_rng(4)
        x = random_cloud(rng)
        z = Tensor(rng.normal(size=(2, 16)))
        perm = rng.permutation(x.shape[1])
        mu1, _ = enc(Tensor(x), z)
        mu2, _ = enc(Tensor(x[:, perm]), z)
        np.testing.assert_allclose(mu1.values[:, perm], mu2.values, atol=1e-12)

    def test_latent_points_track_input_at_init(self, nets):
        _, enc, _ = nets
        rng = np.random.default_rng(5)
        x = random_cloud(rng, b=4, n=64)  # unit-normalized scale
        z = Tensor(rng.normal(size=(4, 16)) * 0.01)
        mu, _ = enc(Tensor(x), z)
        drift = np.linalg.norm(mu.values[:, :, :3] - x, axis=-1).mean()
        assert drift < 0.05


class TestDecoder:
    def test_zeroed_net_returns_latent_xyz(self, small_cfg):
        _, _, dec = build_vae_nets(small_cfg, seed=6)
        dec.head.weight.values[:] = 0.0
        dec.head.bias.values[:] = 0.0
        rng = np.random.default_rng(6)
        h = rng.normal(size=(2, 10, small_cfg.h_channels))
        z = Tensor(rng.normal(size=(2, small_cfg.d_z)))
        out = dec(Tensor(h), z)
        np.testing.assert_array_equal(out.values, h[:, :, :3])

    def test_equivariance_under_joint_permutation(self, nets):
        _, _, dec = nets
        rng = np.random.default_rng(7)
        h = rng.normal(size=(2, 12, 4))
        z = Tensor(rng.normal(size=(2, 16)))
        perm = rng.permutation(12)
        out1 = dec(Tensor(h), z)
        out2 = dec(Tensor(h[:, perm]), z)
        np.testing.assert_allclose(out1.values[:, perm], out2.values, atol=1e-12)

    def test_identity_composition_at_init(self, small_cfg):
        enc_s, enc_p, dec = build_vae_nets(small_cfg, seed=8)
        rng = np.random.default_rng(8)
        x = random_cloud(rng, b=4, n=64)
        mu_z, _ = enc_s(Tensor(x))
        mu_h, _ = enc_p(Tensor(x), mu_z)
        recon = dec(mu_h, mu_z)
        l1 = np.abs(recon.values - x).mean()
        assert l1 < 0.05


class TestPriors:
    def test_shape_prior_output_shape_and_zero_init(self, small_cfg):
        zp, hp = build_prior_nets(small_cfg, seed=9)
        rng = np.random.default_rng(9)
        z_t = Tensor(rng.normal(size=(3, small_cfg.d_z)))
        out = zp(z_t, np.array([1.0, 500.0, 1000.0]))
        assert out.shape == (3, small_cfg.d_z)
        np.testing.assert_array_equal(out.values, 0.0)  # zero-init output layer

    def test_point_prior_equivariance(self, small_cfg):
        _, hp = build_prior_nets(small_cfg, seed=10)
        hp.out.weight.values[:] = np.random.default_rng(10).normal(size=hp.out.weight.values.shape)
        rng = np.random.default_rng(11)
        h = rng.normal(size=(2, 10, small_cfg.h_channels))
        z = Tensor(rng.normal(size=(2, small_cfg.d_z)))
        t = np.array([10.0, 700.0])
        perm = rng.permutation(10)
        o1 = hp(Tensor(h), z, t)
        o2 = hp(Tensor(h[:, perm]), z, t)
        np.testing.assert_allclose(o1.values[:, perm], o2.values, atol=1e-12)
        assert o1.shape == h.shape

    def test_point_prior_conditioning_is_live(self, small_cfg):
        _, hp = build_prior_nets(small_cfg, seed=12)
        hp.out.weight.values[:] = np.random.default_rng(12).normal(size=hp.out.weight.values.shape) * 0.1
        rng = np.random.default_rng(13)
        h = Tensor(rng.normal(size=(1, 8, small_cfg.h_channels)))
        t = np.array([100.0])
        za = Tensor(rng.normal(size=(1, small_cfg.d_z)))
        zb = Tensor(rng.normal(size=(1, small_cfg.d_z)))
        diff = np.abs(hp(h, za, t).values - hp(h, zb, t).values).max()
        assert diff > 0.0

    def test_fractional_time_accepted(self, small_cfg):
        zp, _ = build_prior_nets(small_cfg, seed=14)
        z_t = Tensor(np.random.default_rng(14).normal(size=(1, small_cfg.d_z)))
        out = zp(z_t, np.array([0.25]))
        assert np.isfinite(out.values).all()


class TestGradients:
    def test_all_networks_pass_fd_checks(self, small_cfg):
        tiny = NetConfig(d_z=8, d_h=1, enc_widths=(8, 8), point_widths=(8, 8, 8),
                         dec_widths=(8, 8, 8), prior_width=8, prior_blocks=1, h_prior_widths=(8, 8, 8, 8),
                         t_dim_z=8, t_dim_h=8, dropout=0.0, groups=2)
        enc_s, enc_p, dec = build_vae_nets(tiny, seed=15)
        zp, hp = build_prior_nets(tiny, seed=15)
        zp.out.weight.values[:] = 0.01
        hp.out.weight.values[:] = 0.01
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(1, 6, 3)))
        h = Tensor(rng.normal(size=(1, 6, tiny.h_channels)))
        z = Tensor(rng.normal(size=(1, tiny.d_z)))
        t = np.array([321.0])
        probe_z = rng.normal(size=(1, tiny.d_z))
        probe_h = rng.normal(size=(1, 6, tiny.h_channels))
        probe_x = rng.normal(size=(1, 6, 3))

        cases = [
            (enc_s, lambda: (enc_s(x)[0] * Tensor(probe_z)).sum() + (enc_s(x)[1] * Tensor(probe_z)).sum()),
            (enc_p, lambda: (enc_p(x, z)[0] * Tensor(probe_h)).sum()),
            (dec, lambda: (dec(h, z) * Tensor(probe_x)).sum()),
            (zp, lambda: (zp(z, t) * Tensor(probe_z)).sum()),
            (hp, lambda: (hp(h, z, t) * Tensor(probe_h)).sum()),
        ]
        for module, loss_fn in cases:
            params = module.parameters()[:6]  # spot-check a subset per net
            check_param_grads(loss_fn, params, step=1e-6, tol=1e-4)
