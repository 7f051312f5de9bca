import math

import mpmath as mp
import numpy as np
import pytest
from scipy.integrate import simpson

from lipvae.lipnet import DenseLayer, LipschitzMLP
from lipvae.numerics import SeededRng, finite_diff_grad
from lipvae.vae import (EncoderOutput, VaeModel, cb_log_likelihood, cb_log_normalizer, elbo,
                        elbo_and_grad, kl_to_std_normal, reparameterize)

mp.mp.dps = 40

# -- oracles ----------------------------------------------------------------


def cb_log_normalizer_mp(lam):
    lam = mp.mpf(lam)
    t = 1 - 2 * lam
    if t == 0:
        return mp.log(2)
    return mp.log(2 * mp.atanh(t) / t)


def cb_density(x, lam):
    return np.exp(cb_log_normalizer(lam) + x * np.log(lam) + (1 - x) * np.log1p(-lam))


def zero_model(d_x, d_z, mean_bias, sigma=None, dec_bias=None):
    """Affine zero-weight nets: every input maps to the biases."""
    def net(d_in, d_out, bias, act):
        return LipschitzMLP([DenseLayer(np.zeros((d_out, d_in)), np.asarray(bias, float), 1.0, act,
                                        orthonormalize=False)], None)
    dec = net(d_z, d_x, np.zeros(d_x) if dec_bias is None else dec_bias, "sigmoid")
    if sigma is None:
        return VaeModel(net(d_x, d_z, mean_bias, None), dec, net(d_x, d_z, np.zeros(d_z), "sigmoid"))
    return VaeModel(net(d_x, d_z, mean_bias, None), dec, fixed_sigma=sigma)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# -- Continuous Bernoulli --------------------------------------------------------


def test_cb_normalizer_against_extended_precision():
    for lam in [1e-6, 0.01, 0.3, 0.4999, 0.49995, 0.5, 0.50004, 0.7, 0.99, 1 - 1e-6]:
        assert float(cb_log_normalizer(lam)) == pytest.approx(float(cb_log_normalizer_mp(lam)),
                                                              rel=1e-12, abs=1e-13)


def test_cb_uniform_at_half():
    assert cb_log_likelihood(np.linspace(0, 1, 7), np.full(7, 0.5)) == pytest.approx(0.0, abs=1e-15)


def test_cb_worked_pixel():
    expected = float(cb_log_normalizer_mp(0.9) + mp.log(mp.mpf("0.9")))
    got = float(cb_log_likelihood([1.0], [0.9]))
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(1.01034 - 0.10536, abs=1e-5)


@pytest.mark.parametrize("lam", [0.01, 0.3, 0.5, 0.7, 0.99])
def test_cb_density_integrates_to_one(lam):
    xs = np.linspace(0.0, 1.0, 20001)
    assert abs(simpson(cb_density(xs, lam), x=xs) - 1.0) <= 1e-3


def test_cb_continuous_across_series_switch():
    for side in (-1, 1):
        inner = 0.5 + side * (0.5e-3 - 1e-12)
        outer = 0.5 + side * (0.5e-3 + 1e-12)
        assert abs(cb_log_normalizer(inner) - cb_log_normalizer(outer)) < 1e-6
    # at x = 1/2 the data terms are symmetric in lam, so only the normalizer can differ
    assert abs(cb_log_likelihood([0.5], [0.5 - 1e-4]) - cb_log_likelihood([0.5], [0.5 + 1e-4])) < 1e-6


def test_cb_rejects_out_of_range_data():
    with pytest.raises(ValueError):
        cb_log_likelihood([1.2], [0.5])


def test_cb_clamps_saturated_lambda():
    assert np.isfinite(cb_log_likelihood([0.0, 1.0], [1.0, 0.0]))


# -- KL and reparameterization ------------------------------------------------


def test_kl_zero_at_prior():
    assert kl_to_std_normal(EncoderOutput(np.zeros(3), np.ones(3))) == 0.0


def test_kl_hand_value():
    assert kl_to_std_normal(EncoderOutput(np.array([1.0, 0.0]), np.ones(2))) == 0.5


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mu, s = rng.normal(size=3), rng.uniform(0.3, 1.5, size=3)
        z = mu + s * rng.normal(size=(10**5, 3))
        logq = -0.5 * np.sum(((z - mu) / s) ** 2 + 2 * np.log(s), axis=1)
        logp = -0.5 * np.sum(z**2, axis=1)
        diff = logq - logp
        se = diff.std() / math.sqrt(len(diff))
        assert abs(diff.mean() - kl_to_std_normal(EncoderOutput(mu, s))) <= 3 * se


def test_kl_nonnegative():
    rng = np.random.default_rng(1)
    mu, s = rng.normal(size=(1000, 4)), rng.uniform(0.01, 3, size=(1000, 4))
    assert np.all(kl_to_std_normal(EncoderOutput(mu, s)) >= 0)


def test_reparameterize_cases():
    enc = EncoderOutput(np.array([1.0, 2.0]), np.array([0.5, 0.5]))
    assert np.array_equal(reparameterize(enc, np.zeros(2)), enc.mean)
    assert reparameterize(enc, np.array([2.0, -2.0])).tolist() == [2.0, 1.0]
    eps = np.array([0.3, -0.1])
    assert np.array_equal(reparameterize(EncoderOutput(np.zeros(2), np.ones(2)), eps), eps)


# -- model ----------------------------------------------------------------------


def test_fixed_sigma_is_constant():
    sigma = np.full(4, 0.05)
    model = VaeModel.build(16, 4, 8, 2, lipschitz=5.0, fixed_sigma=sigma, seed=0)
    X = SeededRng(0).uniform(size=(10, 16))
    std = model.encode(X).std
    assert np.all(std == sigma)


def test_zero_weight_encoder_returns_bias():
    model = zero_model(6, 3, [0.1, -0.2, 0.3], sigma=np.ones(3))
    X = SeededRng(1).uniform(size=(4, 6))
    assert np.array_equal(model.encode(X).mean, np.tile([0.1, -0.2, 0.3], (4, 1)))


def test_zero_weight_decoder_is_sigmoid_of_bias():
    bias = np.array([-1.0, 0.0, 2.0])
    model = zero_model(3, 2, [0.0, 0.0], sigma=np.ones(2), dec_bias=bias)
    assert np.allclose(model.decode(np.array([5.0, -3.0])), 1 / (1 + np.exp(-bias)), atol=1e-15)


def test_decoder_monotone_in_latent():
    dec = LipschitzMLP([DenseLayer(np.array([[2.0]]), np.zeros(1), 1.0, "sigmoid", False)], None)
    enc = LipschitzMLP([DenseLayer(np.array([[1.0]]), np.zeros(1), 1.0, None, False)], None)
    model = VaeModel(enc, dec, fixed_sigma=[0.1])
    vals = [float(model.decode(np.array([z]))[0]) for z in np.linspace(-3, 3, 20)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_decode_strictly_inside_unit_interval():
    model = VaeModel.build(8, 2, 8, 1, lipschitz=None, fixed_sigma=[1.0, 1.0], seed=0)
    out = model.decode(np.array([[1e4, -1e4], [-1e4, 1e4]]))
    assert np.all(out > 0) and np.all(out < 1)


def test_constants_are_configured_values():
    model = VaeModel.build(8, 2, 8, 2, lipschitz=(3.0, 4.0, 5.0), seed=0)
    assert model.constants() == (3.0, 4.0, 5.0)
    fixed = VaeModel.build(8, 2, 8, 2, lipschitz=5.0, fixed_sigma=[0.1, 0.1], seed=0)
    assert fixed.constants() == (5.0, 5.0, 0.0)


def test_model_validation():
    a = VaeModel.build(8, 2, 8, 1, lipschitz=2.0, seed=0)
    with pytest.raises(ValueError):
        VaeModel(a.mean_net, a.decoder)  # neither std net nor fixed sigma
    with pytest.raises(ValueError):
        VaeModel(a.mean_net, a.decoder, fixed_sigma=[0.1, -0.1])
    std = VaeModel.build(8, 2, 8, 1, lipschitz=None, seed=0)
    with pytest.raises(ValueError):
        VaeModel(a.mean_net, std.decoder, a.std_net)


def test_encode_matches_oracle():
    model = VaeModel.build(6, 2, 4, 1, lipschitz=3.0, seed=2)
    x = SeededRng(3).uniform(size=6)

    def run(net, h):
        for layer, W in zip(net.layers, net.effective_weights()):
            pre = layer.scale * (W @ h) + layer.bias
            if layer.activation == "groupsort":
                h = np.array([v for k in range(0, len(pre), 2) for v in sorted(pre[k:k + 2])])
            elif layer.activation == "sigmoid":
                h = np.array([1 / (1 + math.exp(-p)) for p in pre])
            else:
                h = pre
        return h

    enc = model.encode(x)
    assert np.max(np.abs(enc.mean - run(model.mean_net, x))) <= 1e-12
    assert np.max(np.abs(enc.std - np.clip(run(model.std_net, x), 1e-6, 1))) <= 1e-12
    z = np.array([0.4, -0.9])
    assert np.max(np.abs(model.decode(z) - run(model.decoder, z))) <= 1e-12


# -- ELBO -----------------------------------------------------------------------


def test_elbo_beta_zero_is_reconstruction():
    model = VaeModel.build(6, 2, 4, 1, lipschitz=3.0, seed=2)
    x, eps = SeededRng(3).uniform(size=6), np.array([0.2, -0.1])
    lam = model.decode(reparameterize(model.encode(x), eps))
    assert elbo(model, x, eps, beta=0.0) == cb_log_likelihood(x, lam)


def test_elbo_on_zero_nets_termwise():
    bias = np.array([0.3, -0.4])
    model = zero_model(5, 2, bias)
    x = np.full(5, 0.5)
    sigma = 0.5  # sigmoid(0)
    expected_kl = 0.5 * np.sum(bias**2 + sigma**2 - 1 - 2 * np.log(sigma))
    assert float(elbo(model, x, np.array([0.7, 0.1]), beta=1.0)) == pytest.approx(-expected_kl, abs=1e-14)


@pytest.mark.parametrize("fixed", [False, True])
@pytest.mark.parametrize("lipschitz", [4.0, None])
def test_elbo_gradient_matches_finite_differences(fixed, lipschitz):
    model = VaeModel.build(6, 2, 8, 2, lipschitz=lipschitz, fixed_sigma=[0.3, 0.2] if fixed else None,
                           seed=3)
    rng = np.random.default_rng(0)
    for net in model.nets().values():
        for layer in net.layers:
            layer.weight += 0.1 * rng.normal(size=layer.weight.shape)
            layer.bias += 0.1 * rng.normal(size=layer.bias.shape)
    model.touch()
    x = SeededRng(1).uniform(size=(3, 6))
    eps = SeededRng(2).normal((3, 2))
    stats = elbo_and_grad(model, x, eps, beta=1.5)
    assert stats.elbo == pytest.approx(float(np.mean(elbo(model, x, eps, beta=1.5))), rel=1e-12)
    for name, net in model.nets().items():
        for p, g in zip(net.params(), stats.grads[name]):
            def f(val, p=p):
                saved = p.copy()
                p[...] = val
                model.touch()
                out = float(np.mean(elbo(model, x, eps, beta=1.5)))
                p[...] = saved
                model.touch()
                return out
            assert rel_err(g, finite_diff_grad(f, p.copy())) <= 1e-4, name
