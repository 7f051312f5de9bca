"""Minibatch (beta-)ELBO maximization with Adam.

Every minibatch reads fresh orthonormalized weights, since the optimizer step
invalidates each network's Björck cache. Randomness for epoch ``e`` comes from
the substream ``(seed, e)``, which makes training resumable from any epoch
boundary with bit-identical results.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .numerics import SeededRng
from .vae import VaeModel, elbo_and_grad

NET_ORDER = ("mean", "std", "decoder")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    beta: float = 1.0
    lipschitz: Optional[float] = None  # None: standard VAE
    fixed_sigma_norm: Optional[float] = None
    desk_scale: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1 or not self.lr > 0:
            raise ValueError("batch size and learning rate must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        """Descent step on ``grads`` (gradients of a loss to minimize), in place."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Trainer:
    """Holds model, optimizer state and history so training can pause and resume."""

    def __init__(self, model: VaeModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.nets = [(name, model.nets()[name]) for name in NET_ORDER if name in model.nets()]
        params = [p for _, net in self.nets for p in net.params()]
        self.optimizer = Adam(params, lr=cfg.lr)
        self.epoch = 0
        self.history: list[dict] = []

    def run_epoch(self, ds: Dataset) -> dict:
        model, cfg = self.model, self.cfg
        if ds.dim != model.input_dim:
            raise ValueError(f"data dimension {ds.dim} != model input {model.input_dim}")
        rng = SeededRng(cfg.seed, (self.epoch,))
        order = rng.permutation(len(ds))
        totals = np.zeros(3)
        for bi, start in enumerate(range(0, len(ds), cfg.batch_size)):
            x = ds.images[order[start:start + cfg.batch_size]]
            eps = rng.normal((len(x), model.latent_dim))
            stats = elbo_and_grad(model, x, eps, cfg.beta)
            if not np.isfinite(stats.elbo):
                raise DivergenceError(f"non-finite loss at batch {bi} of epoch {self.epoch + 1}")
            grads = [-g for name, _ in self.nets for g in stats.grads[name]]
            self.optimizer.step(grads)
            model.touch()
            totals += len(x) * np.array([stats.elbo, stats.recon, stats.kl])
        self.epoch += 1
        mean = totals / len(ds)
        record = {"epoch": self.epoch, "elbo": float(mean[0]), "recon_ll": float(mean[1]),
                  "kl": float(mean[2])}
        self.history.append(record)
        return record

    def fit(self, ds: Dataset, epochs: Optional[int] = None, callback=None) -> list[dict]:
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            record = self.run_epoch(ds)
            if callback is not None:
                callback(record)
        return self.history


def train(model: VaeModel, ds: Dataset, cfg: TrainConfig) -> tuple[VaeModel, list[dict]]:
    trainer = Trainer(model, cfg)
    trainer.fit(ds)
    return model, trainer.history
