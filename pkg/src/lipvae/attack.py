"""Adversarial attacks on VAEs and empirical r-robustness margin estimation.

The maximum damage attack maximizes the expected reconstruction displacement
``E |g(z_delta) - g(z)|`` over an l2 ball; the latent space attack minimizes the
KL divergence between the perturbed posterior and a target posterior. Both run
projected gradient steps along the normalized gradient.

Internally every attack works on a batch of independent rows (datapoint x
restart), each with its own RNG substream, so a point's random draws do not
depend on which other points share its batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import DTYPE, SeededRng
from .vae import LAMBDA_EPS, STD_FLOOR, EncoderOutput, VaeModel


@dataclass(frozen=True)
class AttackConfig:
    budget: float = 1.0
    steps: int = 200
    restarts: int = 5
    samples: int = 64
    eval_samples: int = 1000
    seed: int = 0
    step_size: Optional[float] = None  # None: budget / 10
    clip: bool = False

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if min(self.steps, self.restarts, self.samples, self.eval_samples) < 1:
            raise ValueError("steps, restarts and sample counts must be >= 1")

    def step_for(self, budget: float) -> float:
        return budget / 10.0 if self.step_size is None else self.step_size


@dataclass
class AttackResult:
    delta: np.ndarray
    objective: float
    trace: np.ndarray  # best-so-far objective after each step, over all restarts
    restart_traces: np.ndarray  # (restarts, steps + 1) raw per-step objectives
    restart_best: np.ndarray
    restart_deltas: np.ndarray
    r_prob: Optional[float] = None


@dataclass
class MarginEstimate:
    radius: float  # 0.0 when no positive margin was found
    probes: list = field(default_factory=list)  # (radius, [T probabilities])
    reason: str = "found"  # "found" | "exhausted"


def project_l2_ball(v, budget: float) -> np.ndarray:
    """Project onto ``{|d| <= budget}``; rows are projected independently for 2-D input."""
    v = np.asarray(v, dtype=DTYPE)
    budget = np.asarray(budget, dtype=DTYPE)
    if np.any(budget < 0):
        raise ValueError("budget must be nonnegative")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    b = budget[..., None] if budget.ndim else budget
    factor = np.where(norm > b, b / np.where(norm > 0, norm, 1.0), 1.0)
    return v * factor


def kl_diag_gaussians(mu1, s1, mu2, s2) -> np.ndarray:
    """``KL(N(mu1, diag s1^2) || N(mu2, diag s2^2))`` summed over the last axis."""
    mu1, s1, mu2, s2 = (np.asarray(a, dtype=DTYPE) for a in (mu1, s1, mu2, s2))
    if np.any(s1 <= 0) or np.any(s2 <= 0):
        raise ValueError("standard deviations must be positive")
    return np.sum(np.log(s2 / s1) + (s1**2 + (mu1 - mu2) ** 2) / (2.0 * s2**2) - 0.5, axis=-1)


# -- shared pieces --------------------------------------------------------------


def _encode_with_tapes(model: VaeModel, x):
    mu, mt = model.mean_net.forward(x)
    if model.std_net is None:
        return mu, np.broadcast_to(model.fixed_sigma, mu.shape), (mt, None, None)
    raw, st = model.std_net.forward(x)
    std = np.clip(raw, STD_FLOOR, 1.0)
    return mu, std, (mt, st, (raw >= STD_FLOOR) & (raw <= 1.0))


def _encoder_input_grad(model: VaeModel, tapes, dmu, dstd) -> np.ndarray:
    mt, st, mask = tapes
    g = model.mean_net.backward(mt, dmu, params=False).input
    if st is not None:
        g = g + model.std_net.backward(st, dstd * mask, params=False).input
    return g


def _apply_delta(x, delta, clip: bool):
    xp = x + delta
    if clip:
        xp = np.clip(xp, 0.0, 1.0)
    return xp


def _init_deltas(rngs: Sequence[SeededRng], dim: int, budgets: np.ndarray) -> np.ndarray:
    dirs = np.stack([rng.normal(dim) for rng in rngs])
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs / np.where(norms > 0, norms, 1.0) * (0.5 * budgets[:, None])


def _unit(g: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.where(n > 0, n, 1.0)


def _pair_distances(model: VaeModel, xp, enc0: EncoderOutput, eps1, eps2, grad: bool):
    """Mean distance ``|g(z_delta) - g(z)|`` per row, and its gradient in ``xp``."""
    B, S, dz = eps1.shape
    mu, std, tapes = _encode_with_tapes(model, xp)
    z1 = (mu[:, None, :] + std[:, None, :] * eps1).reshape(B * S, dz)
    z2 = (enc0.mean[:, None, :] + enc0.std[:, None, :] * eps2).reshape(B * S, dz)
    raw1, dtape = model.decoder.forward(z1)
    g1 = np.clip(raw1, LAMBDA_EPS, 1.0 - LAMBDA_EPS)
    g2 = np.clip(model.decoder(z2), LAMBDA_EPS, 1.0 - LAMBDA_EPS)
    diff = g1 - g2
    dist = np.linalg.norm(diff, axis=1)
    obj = dist.reshape(B, S).mean(axis=1)
    if not grad:
        return obj, dist.reshape(B, S), None
    dg = diff / np.where(dist > 0, dist, 1.0)[:, None] / S
    dg *= (raw1 >= LAMBDA_EPS) & (raw1 <= 1.0 - LAMBDA_EPS)
    dz1 = model.decoder.backward(dtape, dg, params=False).input.reshape(B, S, dz)
    dmu = dz1.sum(axis=1)
    dstd = (dz1 * eps1).sum(axis=1)
    return obj, dist.reshape(B, S), _encoder_input_grad(model, tapes, dmu, dstd)


def _draw(rngs, shape) -> np.ndarray:
    return np.stack([rng.normal(shape) for rng in rngs])


def _r_prob_rows(model, X, deltas, enc0, rngs, r, samples, clip, chunk=250):
    """Per-row fraction of ``samples`` fresh pairs whose distance is within ``r``."""
    hits = np.zeros(len(X))
    xp = _apply_delta(X, deltas, clip)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        eps1 = _draw(rngs, (m, model.latent_dim))
        eps2 = _draw(rngs, (m, model.latent_dim))
        _, dist, _ = _pair_distances(model, xp, enc0, eps1, eps2, grad=False)
        hits += np.sum(dist <= r, axis=1)
        done += m
    return hits / samples


def _max_damage_rows(model: VaeModel, X, budgets, rngs, cfg: AttackConfig):
    """Projected gradient ascent on the expected displacement, one row per restart."""
    B, d = X.shape
    enc0 = model.encode(X)
    delta = _init_deltas(rngs, d, budgets)
    steps_sz = np.array([cfg.step_for(b) for b in budgets])
    traces = np.empty((B, cfg.steps + 1))
    best = np.full(B, -np.inf)
    best_delta = delta.copy()
    for k in range(cfg.steps + 1):
        if cfg.clip:
            delta = _apply_delta(X, delta, True) - X
        eps1 = _draw(rngs, (cfg.samples, model.latent_dim))
        eps2 = _draw(rngs, (cfg.samples, model.latent_dim))
        obj, _, g = _pair_distances(model, X + delta, enc0, eps1, eps2, grad=k < cfg.steps)
        bad = ~np.isfinite(obj)
        obj = np.where(bad, -np.inf, obj)
        traces[:, k] = obj
        better = obj > best
        best[better] = obj[better]
        best_delta[better] = delta[better]
        if k == cfg.steps:
            break
        g = np.where(bad[:, None], 0.0, g)
        delta = project_l2_ball(delta + steps_sz[:, None] * _unit(g), budgets)
    return best_delta, best, traces


def _result(deltas, best, traces, r_probs=None) -> AttackResult:
    i = int(np.argmax(best))
    running = np.maximum.accumulate(traces.max(axis=0))
    prob = None if r_probs is None else float(r_probs[i])
    return AttackResult(deltas[i].copy(), float(best[i]), running, traces, best, deltas, prob)


def max_damage_attack(model: VaeModel, x, cfg: AttackConfig, r: Optional[float] = None,
                      rng: Optional[SeededRng] = None) -> AttackResult:
    """Norm-bounded perturbation maximizing the expected reconstruction displacement.

    Runs ``cfg.restarts`` independent restarts initialized uniformly on the
    sphere of radius ``budget/2``; the best restart's iterate is returned.
    With ``r`` given, the r-robustness probability at each restart's
    perturbation is estimated from ``cfg.eval_samples`` fresh pairs.
    """
    x = np.asarray(x, dtype=DTYPE)
    rng = SeededRng(cfg.seed) if rng is None else rng
    T = cfg.restarts
    rngs = [rng.spawn(t) for t in range(T)]
    X = np.repeat(x[None, :], T, axis=0)
    budgets = np.full(T, float(cfg.budget))
    deltas, best, traces = _max_damage_rows(model, X, budgets, rngs, cfg)
    probs = None
    if r is not None:
        probs = _r_prob_rows(model, X, deltas, model.encode(X), rngs, r, cfg.eval_samples, cfg.clip)
    return _result(deltas, best, traces, probs)


def latent_space_attack(model: VaeModel, x_o, x_t, cfg: AttackConfig,
                        rng: Optional[SeededRng] = None) -> AttackResult:
    """Norm-bounded perturbation of ``x_o`` pulling its posterior toward that of ``x_t``.

    The objective is deterministic, so a step that fails to lower the KL is
    rejected and the step size halved. ``trace`` is the best-so-far KL
    (nonincreasing); ``objective`` is the final best KL.
    """
    x_o = np.asarray(x_o, dtype=DTYPE)
    rng = SeededRng(cfg.seed) if rng is None else rng
    T = cfg.restarts
    rngs = [rng.spawn(t) for t in range(T)]
    X = np.repeat(x_o[None, :], T, axis=0)
    target = model.encode(np.asarray(x_t, dtype=DTYPE)[None, :])
    mu_t, s_t = target.mean, target.std
    budgets = np.full(T, float(cfg.budget))

    def evaluate(delta, grad):
        mu, std, tapes = _encode_with_tapes(model, _apply_delta(X, delta, cfg.clip))
        kl = kl_diag_gaussians(mu, std, mu_t, s_t)
        if not grad:
            return kl, None
        dmu = (mu - mu_t) / s_t**2
        dstd = -1.0 / std + std / s_t**2
        return kl, _encoder_input_grad(model, tapes, dmu, dstd)

    delta = _init_deltas(rngs, X.shape[1], budgets)
    if cfg.clip:
        delta = _apply_delta(X, delta, True) - X
    step = np.full(T, cfg.step_for(cfg.budget))
    cur, g = evaluate(delta, True)
    traces = np.empty((T, cfg.steps + 1))
    traces[:, 0] = cur
    for k in range(1, cfg.steps + 1):
        cand = project_l2_ball(delta - step[:, None] * _unit(g), budgets)
        if cfg.clip:
            cand = _apply_delta(X, cand, True) - X
        val, _ = evaluate(cand, False)
        accept = np.isfinite(val) & (val < cur)
        if np.any(accept):
            delta[accept] = cand[accept]
            new_val, new_g = evaluate(delta, True)
            cur = np.where(accept, new_val, cur)
            g = np.where(accept[:, None], new_g, g)
        step = np.where(accept, step, 0.5 * step)
        traces[:, k] = cur
    best = -cur  # _result maximizes
    res = _result(delta, best, -traces)
    res.objective = -res.objective
    res.trace = -res.trace
    res.restart_traces = traces
    res.restart_best = cur
    return res


def estimate_r_prob(model: VaeModel, x, delta, r: float, S: int, rng: SeededRng) -> float:
    """Fraction of ``S`` independent pairs ``(z_delta, z)`` decoded within distance ``r``."""
    if S < 1:
        raise ValueError("S must be >= 1")
    X = np.asarray(x, dtype=DTYPE)[None, :]
    D = np.asarray(delta, dtype=DTYPE)[None, :]
    return float(_r_prob_rows(model, X, D, model.encode(X), [rng], r, S, False)[0])


def expected_distortion(model: VaeModel, x, delta, S: int, rng: SeededRng, clip: bool = False) -> float:
    """Fresh ``S``-sample estimate of ``E |g(z_delta) - g(z)|``, free of the attack's selection bias."""
    X = np.asarray(x, dtype=DTYPE)[None, :]
    D = np.asarray(delta, dtype=DTYPE)[None, :]
    eps1 = rng.normal((1, S, model.latent_dim))
    eps2 = rng.normal((1, S, model.latent_dim))
    obj, _, _ = _pair_distances(model, _apply_delta(X, D, clip), model.encode(X), eps1, eps2, grad=False)
    return float(obj[0])


def estimate_margins(model: VaeModel, X, r: float, max_R: float = 5.0, alpha: float = 0.25,
                     S: int = 1000, T: int = 5, seed: int = 0,
                     cfg: AttackConfig = AttackConfig(), keys=None) -> list[MarginEstimate]:
    """Decreasing-ladder margin estimate for every row of ``X``.

    Starting at ``max_R`` and stepping down by ``alpha`` while positive, each
    point receives ``T`` maximum damage attacks at the current radius; the
    first radius where every attack leaves an estimated r-robustness
    probability above 1/2 (from ``S`` fresh pairs) is the estimate. Row
    ``i`` draws only from the substream ``(seed, keys[i])`` (default key ``i``),
    so results do not depend on which other points share the batch.
    """
    if not (max_R > 0 and alpha > 0):
        raise ValueError("max_R and alpha must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    n = len(X)
    keys = range(n) if keys is None else [int(k) for k in keys]
    if len(keys) != n:
        raise ValueError("need one stream key per row")
    point_rngs = [SeededRng(seed, (k,)) for k in keys]
    results = [MarginEstimate(0.0, [], "exhausted") for _ in range(n)]
    active = list(range(n))
    rung = 0
    # small slack keeps max_R - k*alpha from stopping one rung early on round-off
    while active and max_R - rung * alpha > 1e-12 * max_R:
        radius = max_R - rung * alpha
        rows = [(i, t) for i in active for t in range(T)]
        rngs = [point_rngs[i].spawn(rung, t) for i, t in rows]
        Xr = X[[i for i, _ in rows]]
        budgets = np.full(len(rows), radius)
        deltas, _, _ = _max_damage_rows(model, Xr, budgets, rngs, cfg)
        probs = _r_prob_rows(model, Xr, deltas, model.encode(Xr), rngs, r, S, cfg.clip)
        probs = probs.reshape(len(active), T)
        still = []
        for j, i in enumerate(active):
            results[i].probes.append((radius, probs[j].tolist()))
            if np.all(probs[j] > 0.5):
                results[i].radius = radius
                results[i].reason = "found"
            else:
                still.append(i)
        active = still
        rung += 1
    return results


def estimate_margin(model: VaeModel, x, r: float, max_R: float = 5.0, alpha: float = 0.25,
                    S: int = 1000, T: int = 5, seed: int = 0,
                    cfg: AttackConfig = AttackConfig()) -> MarginEstimate:
    return estimate_margins(model, np.asarray(x)[None, :], r, max_R, alpha, S, T, seed, cfg)[0]


def ladder_length(max_R: float, alpha: float) -> int:
    return math.ceil(max_R / alpha - 1e-12)
