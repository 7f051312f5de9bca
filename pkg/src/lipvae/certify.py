"""Certified r-robustness bounds for Lipschitz VAEs.

All functions are pure in a :class:`CertInput`. Notation: ``a``, ``b``, ``c``
are the Lipschitz constants of the decoder, encoder mean and encoder std;
``sigma_norm`` is the l2 norm of the encoder std at the input (or of the fixed
std vector); ``t`` denotes a perturbation norm.

Two tail bounds on ``P(|z_delta - z| >= r/a)`` are provided: a Markov bound
(``p1``) and a chi-square tail bound (``p2``). The margin is the largest ``t``
at which the better of the two still leaves robustness probability >= 1/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

MARGIN_GRID = 10_000
MARGIN_TOL = 1e-9

BRANCH_TAIL = "tail"
BRANCH_OTHERWISE = "otherwise"
BRANCH_DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class CertInput:
    a: float
    b: float
    c: float
    sigma_norm: float
    d_z: int
    r: float
    delta_norm: Optional[float] = None

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("a and b must be positive")
        if self.c < 0 or self.sigma_norm < 0:
            raise ValueError("c and sigma_norm must be nonnegative")
        if not self.r > 0:
            raise ValueError("r must be positive")
        if int(self.d_z) != self.d_z or self.d_z < 1:
            raise ValueError("d_z must be a positive integer")
        if self.delta_norm is not None and self.delta_norm < 0:
            raise ValueError("delta_norm must be nonnegative")

    def at(self, delta_norm: float) -> "CertInput":
        return replace(self, delta_norm=float(delta_norm))


@dataclass
class CertReport:
    p1: Optional[float]
    p2: Optional[float]
    p2_branch: Optional[str]
    lower_bound: Optional[float]
    m1: Optional[float]
    m2: float
    margin: float
    m1_exists: bool


def _need_delta(inp: CertInput) -> float:
    if inp.delta_norm is None:
        raise ValueError("this bound needs delta_norm")
    return inp.delta_norm


def log_c_of_dz(d_z: int) -> float:
    return 0.5 * (d_z - (d_z - 1) * math.log(d_z)) - 0.5 * math.log(math.pi)


def c_of_dz(d_z: int) -> float:
    """Constant of the chi-square tail bound, ``exp((d - (d-1) log d)/2) / sqrt(pi)``."""
    if d_z < 1:
        raise ValueError("d_z must be >= 1")
    return math.exp(log_c_of_dz(d_z))


def p1(inp: CertInput) -> float:
    """Markov bound on the probability that latent samples land r/a apart."""
    t = _need_delta(inp)
    spread = inp.c * t + 2.0 * inp.sigma_norm
    raw = (inp.a * math.hypot(inp.b * t, spread) / inp.r) ** 2
    return min(1.0, raw)


def p2(inp: CertInput) -> tuple[float, str]:
    """Chi-square tail bound and the branch that produced it.

    Returns ``(value, branch)``; branch is ``"tail"`` when the tail expression
    applies, ``"otherwise"`` when a validity condition fails (value 1), and
    ``"deterministic"`` when the latent spread is zero (value 0 by the limit
    ``u -> inf``).
    """
    t = _need_delta(inp)
    gap = inp.r / inp.a - inp.b * t
    d = inp.d_z
    if gap < 0 or d < 2:
        return 1.0, BRANCH_OTHERWISE
    spread = inp.c * t + 2.0 * inp.sigma_norm
    if spread == 0:
        if gap > 0:
            return 0.0, BRANCH_DETERMINISTIC
        return 1.0, BRANCH_OTHERWISE
    q = gap / spread
    u = q * q
    if math.isinf(u):
        return 0.0, BRANCH_TAIL
    if not u > d - 2:
        return 1.0, BRANCH_OTHERWISE
    log_val = log_c_of_dz(d) + 0.5 * d * math.log(u) - 0.5 * u - math.log(u - d + 2)
    return (math.exp(log_val) if log_val < 0 else 1.0), BRANCH_TAIL


def robustness_prob_lower_bound(inp: CertInput) -> float:
    return 1.0 - min(p1(inp), p2(inp)[0])


def margin_m1(inp: CertInput) -> Optional[float]:
    """Largest ``t`` with ``p1(t) <= 1/2``, or ``None`` when no such ``t >= 0`` exists.

    Solves ``(c^2+b^2) t^2 + 4 c s t + 4 s^2 - (r/a)^2 / 2 = 0``; for ``c = 0``
    this reduces to ``sqrt((r/a)^2/2 - 4 s^2) / b``.
    """
    a, b, c, s = inp.a, inp.b, inp.c, inp.sigma_norm
    const = 4.0 * s * s - 0.5 * (inp.r / a) ** 2
    if const > 0:
        return None
    if c == 0:
        return math.sqrt(-const) / b
    if const == 0:
        return 0.0
    quad = c * c + b * b
    lin = 4.0 * c * s
    disc = lin * lin - 4.0 * quad * const
    # const <= 0 <= lin, so this form of the larger root has no cancellation
    return -2.0 * const / (lin + math.sqrt(disc))


def margin_m2(inp: CertInput) -> float:
    """Largest ``t`` with ``p2(t) <= 1/2``, by grid scan then bisection.

    ``p2`` is nondecreasing in ``t`` and equals 1 beyond ``r/(a b)``, so the
    search runs over ``[0, r/(a b)]``. Returns 0 when ``p2(0) > 1/2``.
    """
    def ok(t):
        return p2(inp.at(t))[0] <= 0.5

    if not ok(0.0):
        return 0.0
    hi_bound = inp.r / (inp.a * inp.b)
    grid = np.linspace(0.0, hi_bound, MARGIN_GRID + 1)
    lo = 0.0
    hi = None
    for t in grid[1:]:
        if ok(t):
            lo = float(t)
        else:
            hi = float(t)
            break
    if hi is None:
        return hi_bound
    while hi - lo > MARGIN_TOL:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def margin_bound(inp: CertInput) -> float:
    """Certified r-robustness margin at the input: ``max(m1, m2)``, missing m1 counted as 0."""
    m1 = margin_m1(inp)
    return max(m1 or 0.0, margin_m2(inp))


def global_margin(a: float, b: float, sigma_norm: float, d_z: int, r: float) -> float:
    """Input-independent margin for a fixed encoder std vector of norm ``sigma_norm``."""
    return margin_bound(CertInput(a, b, 0.0, sigma_norm, d_z, r))


def certify(inp: CertInput) -> CertReport:
    """Evaluate every bound; probability fields are filled only when ``delta_norm`` is set."""
    m1 = margin_m1(inp)
    m2 = margin_m2(inp)
    if inp.delta_norm is None:
        v1 = v2 = branch = lower = None
    else:
        v1 = p1(inp)
        v2, branch = p2(inp)
        lower = 1.0 - min(v1, v2)
    return CertReport(v1, v2, branch, lower, m1, m2, max(m1 or 0.0, m2), m1 is not None)
