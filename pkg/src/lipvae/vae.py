"""Diagonal-Gaussian VAE with a Continuous Bernoulli likelihood.

The encoder is a mean network plus either a standard-deviation network ending
in a Sigmoid or a fixed standard-deviation vector. The decoder ends in a
Sigmoid and its output ``lam`` is both the Continuous Bernoulli parameter and
the reconstruction used for every distance computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .lipnet import LipschitzMLP, OrthoConfig, certified_constant
from .numerics import DTYPE, SeededRng, ShapeError

STD_FLOOR = 1e-6
LAMBDA_EPS = 1e-6
_SERIES_SWITCH = 1e-3


@dataclass
class EncoderOutput:
    mean: np.ndarray
    std: np.ndarray


class VaeModel:
    """Encoder-mean net, encoder-std net (or fixed vector) and decoder net.

    ``constants()`` returns the certified ``(a, b, c)`` for the decoder,
    encoder mean and encoder std; ``c`` is 0 in fixed-sigma mode.
    """

    def __init__(self, mean_net: LipschitzMLP, decoder: LipschitzMLP,
                 std_net: Optional[LipschitzMLP] = None, fixed_sigma=None, beta: float = 1.0):
        if (std_net is None) == (fixed_sigma is None):
            raise ValueError("give exactly one of std_net and fixed_sigma")
        d_z = mean_net.out_dim
        if d_z < 1:
            raise ValueError("latent dimension must be >= 1")
        if decoder.in_dim != d_z:
            raise ShapeError(f"decoder input {decoder.in_dim} != latent dimension {d_z}")
        if decoder.out_dim != mean_net.in_dim:
            raise ShapeError("decoder output must match the data dimension")
        if std_net is not None:
            if std_net.in_dim != mean_net.in_dim or std_net.out_dim != d_z:
                raise ShapeError("std net must map data space to latent space")
        else:
            fixed_sigma = np.asarray(fixed_sigma, dtype=DTYPE).reshape(-1)
            if fixed_sigma.shape != (d_z,):
                raise ShapeError(f"fixed sigma must have length {d_z}")
            if not np.all(fixed_sigma > 0):
                raise ValueError("fixed sigma entries must be positive")
        constrained = [n.lipschitz is not None for n in (mean_net, decoder, std_net) if n is not None]
        if any(constrained) and not all(constrained):
            raise ValueError("mixing constrained and unconstrained networks is not supported")
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        self.mean_net = mean_net
        self.decoder = decoder
        self.std_net = std_net
        self.fixed_sigma = fixed_sigma
        self.beta = float(beta)

    @classmethod
    def build(cls, input_dim: int, latent_dim: int = 10, width: int = 512, hidden_layers: int = 3,
              lipschitz: Union[None, float, Sequence[float]] = None, fixed_sigma=None,
              beta: float = 1.0, seed: int = 0, ortho: OrthoConfig = OrthoConfig()) -> "VaeModel":
        """Default architecture: every net has ``hidden_layers`` hidden layers of ``width``.

        ``lipschitz`` is ``None`` (standard VAE), one constant for all nets, or
        a tuple ``(a, b, c)`` for decoder, encoder mean and encoder std.
        """
        if lipschitz is None:
            a = b = c = None
        elif np.ndim(lipschitz) == 0:
            a = b = c = float(lipschitz)
        else:
            a, b, c = (float(v) for v in lipschitz)
        rng = SeededRng(seed)
        enc_sizes = [input_dim] + [width] * hidden_layers + [latent_dim]
        dec_sizes = [latent_dim] + [width] * hidden_layers + [input_dim]
        mean_net = LipschitzMLP.build(enc_sizes, b, rng.spawn(0), None, ortho=ortho)
        decoder = LipschitzMLP.build(dec_sizes, a, rng.spawn(1), "sigmoid", ortho=ortho)
        std_net = None
        if fixed_sigma is None:
            std_net = LipschitzMLP.build(enc_sizes, c, rng.spawn(2), "sigmoid", ortho=ortho)
        return cls(mean_net, decoder, std_net, fixed_sigma, beta)

    @property
    def latent_dim(self) -> int:
        return self.mean_net.out_dim

    @property
    def input_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def mode(self) -> str:
        return "standard" if self.mean_net.lipschitz is None else "lipschitz"

    def nets(self) -> dict:
        out = {"mean": self.mean_net, "decoder": self.decoder}
        if self.std_net is not None:
            out["std"] = self.std_net
        return out

    def touch(self):
        for net in self.nets().values():
            net.touch()

    def constants(self, tight: bool = False) -> tuple[float, float, float]:
        """Certified ``(a, b, c)``; raises ``CertificationError`` for standard models."""
        a = certified_constant(self.decoder, tight=tight)
        b = certified_constant(self.mean_net)
        c = 0.0 if self.std_net is None else certified_constant(self.std_net, tight=tight)
        return a, b, c

    def encode(self, x) -> EncoderOutput:
        mean = self.mean_net(x)
        if self.std_net is None:
            std = np.broadcast_to(self.fixed_sigma, mean.shape).copy()
        else:
            std = np.clip(self.std_net(x), STD_FLOOR, 1.0)
        return EncoderOutput(mean, std)

    def decode(self, z) -> np.ndarray:
        return np.clip(self.decoder(z), LAMBDA_EPS, 1.0 - LAMBDA_EPS)

    def sigma_norm(self, x) -> np.ndarray:
        return np.linalg.norm(self.encode(x).std, axis=-1)


def reparameterize(enc: EncoderOutput, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=DTYPE)
    if eps.shape[-1] != enc.mean.shape[-1]:
        raise ShapeError(f"noise dimension {eps.shape[-1]} != latent dimension {enc.mean.shape[-1]}")
    return enc.mean + enc.std * eps


def cb_log_normalizer(lam) -> np.ndarray:
    """``log C(lam)`` with ``C(lam) = 2 atanh(1 - 2 lam) / (1 - 2 lam)``.

    Near ``lam = 1/2`` the ratio is 0/0, so a Taylor series in ``t = 1 - 2 lam``
    takes over for ``|t| < 1e-3``.
    """
    t = 1.0 - 2.0 * np.asarray(lam, dtype=DTYPE)
    small = np.abs(t) < _SERIES_SWITCH
    ts = np.where(small, 0.5, t)
    exact = np.log(2.0 * np.arctanh(ts) / ts)
    t2 = t * t
    series = math.log(2.0) + t2 / 3.0 + 13.0 * t2 * t2 / 90.0
    return np.where(small, series, exact)


def _cb_log_normalizer_grad(lam: np.ndarray) -> np.ndarray:
    # d/dlam log C = -2 d/dt [log atanh(t) - log t]
    t = 1.0 - 2.0 * lam
    small = np.abs(t) < _SERIES_SWITCH
    ts = np.where(small, 0.5, t)
    exact = 1.0 / ((1.0 - ts * ts) * np.arctanh(ts)) - 1.0 / ts
    series = 2.0 * t / 3.0 + 52.0 * t**3 / 90.0
    return -2.0 * np.where(small, series, exact)


def cb_log_likelihood(x, lam) -> np.ndarray:
    """Continuous Bernoulli log-density summed over the last axis."""
    x = np.asarray(x, dtype=DTYPE)
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        raise ValueError("Continuous Bernoulli data must lie in [0, 1]")
    lam = np.clip(np.asarray(lam, dtype=DTYPE), LAMBDA_EPS, 1.0 - LAMBDA_EPS)
    ll = cb_log_normalizer(lam) + x * np.log(lam) + (1.0 - x) * np.log1p(-lam)
    return ll.sum(axis=-1)


def kl_to_std_normal(enc: EncoderOutput) -> np.ndarray:
    mu, s = enc.mean, enc.std
    return 0.5 * np.sum(mu * mu + s * s - 1.0 - 2.0 * np.log(s), axis=-1)


def elbo(model: VaeModel, x, eps, beta: Optional[float] = None):
    """Single-sample ELBO estimate per datapoint (scalar for a single ``x``)."""
    beta = model.beta if beta is None else beta
    enc = model.encode(x)
    lam = model.decode(reparameterize(enc, eps))
    return cb_log_likelihood(x, lam) - beta * kl_to_std_normal(enc)


@dataclass
class ElboStats:
    elbo: float
    recon: float
    kl: float
    grads: dict  # net name -> list of parameter gradients of the mean ELBO


def elbo_and_grad(model: VaeModel, x, eps, beta: Optional[float] = None) -> ElboStats:
    """Batch-mean ELBO and its exact gradient with respect to every parameter."""
    beta = model.beta if beta is None else beta
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    eps = np.atleast_2d(np.asarray(eps, dtype=DTYPE))
    n = x.shape[0]
    if eps.shape != (n, model.latent_dim):
        raise ShapeError(f"noise shape {eps.shape} != {(n, model.latent_dim)}")

    mu, mean_tape = model.mean_net.forward(x)
    if model.std_net is None:
        std = np.broadcast_to(model.fixed_sigma, mu.shape)
        std_mask = None
    else:
        raw_std, std_tape = model.std_net.forward(x)
        std = np.clip(raw_std, STD_FLOOR, 1.0)
        std_mask = (raw_std >= STD_FLOOR) & (raw_std <= 1.0)
    z = mu + std * eps
    raw_lam, dec_tape = model.decoder.forward(z)
    lam = np.clip(raw_lam, LAMBDA_EPS, 1.0 - LAMBDA_EPS)

    recon = cb_log_likelihood(x, lam)
    kl = kl_to_std_normal(EncoderOutput(mu, std))

    dlam = (x / lam - (1.0 - x) / (1.0 - lam) + _cb_log_normalizer_grad(lam)) / n
    dlam = dlam * ((raw_lam >= LAMBDA_EPS) & (raw_lam <= 1.0 - LAMBDA_EPS))
    dec = model.decoder.backward(dec_tape, dlam)
    dz = dec.input
    grads = {"decoder": dec.params}
    grads["mean"] = model.mean_net.backward(mean_tape, dz - beta * mu / n).params
    if model.std_net is not None:
        dstd = (dz * eps - beta * (std - 1.0 / std) / n) * std_mask
        grads["std"] = model.std_net.backward(std_tape, dstd).params
    return ElboStats(float(np.mean(recon - beta * kl)), float(np.mean(recon)),
                     float(np.mean(kl)), grads)
