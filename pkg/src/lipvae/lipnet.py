"""Fully-connected networks with an enforced Lipschitz constant.

Each constrained layer computes ``M**(1/L) * bjorck(W) @ h + b`` followed by a
1-Lipschitz activation, so the whole network is ``M``-Lipschitz. Gradients are
exact reverse-mode derivatives of that composition, including the unrolled
Björck iterations and the safe pre-scaling.

The same class also serves unconstrained ("standard") networks: pass
``lipschitz=None`` and the raw weights are used directly, typically with ReLU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import DTYPE, SeededRng, ShapeError

ACTIVATIONS = ("groupsort", "relu", "sigmoid", None)


class OrthonormalizationError(FloatingPointError):
    """Björck iteration produced non-finite values."""


class CertificationError(RuntimeError):
    """A network cannot be certified (unconstrained, or a stale layer)."""


class TapeError(RuntimeError):
    """A gradient tape no longer matches the network that produced it."""


@dataclass(frozen=True)
class OrthoConfig:
    iters: int = 20
    order: int = 1
    tol: float = 1e-6
    safe_scaling: bool = True

    def __post_init__(self):
        if self.iters < 1 or self.order < 1:
            raise ValueError("Björck iteration count and order must be >= 1")
        if not self.tol > 0:
            raise ValueError("ortho tolerance must be positive")


def series_coefficients(order: int) -> list[float]:
    """Coefficients of the truncated expansion of ``(I - Q)**(-1/2)``: 1, 1/2, 3/8, ..."""
    return [math.comb(2 * i, i) / 4.0**i for i in range(order + 1)]


def semi_orthogonality_residual(W: np.ndarray) -> float:
    """``max |G - I|`` with ``G`` the Gram matrix on the smaller dimension."""
    m, n = W.shape
    G = W.T @ W if m >= n else W @ W.T
    return float(np.max(np.abs(G - np.eye(min(m, n)))))


@dataclass
class OrthoResult:
    matrix: np.ndarray
    residual: float
    converged: bool


@dataclass
class _BjorckCache:
    wide: bool
    raw: np.ndarray  # tall orientation, before scaling
    scale: float
    argmax_col: int
    argmax_row: int
    n1: float
    ninf: float


def _poly_factor(Q: np.ndarray, coeffs: Sequence[float]) -> tuple[np.ndarray, list[np.ndarray]]:
    eye = np.eye(Q.shape[0])
    powers = [eye]
    P = coeffs[0] * eye
    for c in coeffs[1:]:
        powers.append(powers[-1] @ Q)
        P = P + c * powers[-1]
    return P, powers


def _bjorck_forward(W: np.ndarray, cfg: OrthoConfig) -> tuple[np.ndarray, _BjorckCache]:
    W = np.asarray(W, dtype=DTYPE)
    if W.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise OrthonormalizationError("non-finite input matrix")
    wide = W.shape[0] < W.shape[1]
    A = W.T if wide else W
    cache = _BjorckCache(wide, A, 1.0, -1, -1, 0.0, 0.0)
    if cfg.safe_scaling:
        absA = np.abs(A)
        col = absA.sum(axis=0)
        row = absA.sum(axis=1)
        j, i = int(np.argmax(col)), int(np.argmax(row))
        s = math.sqrt(col[j] * row[i])
        if s > 0:
            cache.scale, cache.argmax_col, cache.argmax_row = s, j, i
            cache.n1, cache.ninf = float(col[j]), float(row[i])
            A = A / s
    coeffs = series_coefficients(cfg.order)
    eye = np.eye(A.shape[1])
    for k in range(cfg.iters):
        P, _ = _poly_factor(eye - A.T @ A, coeffs)
        A = A @ P
        if not np.all(np.isfinite(A)):
            raise OrthonormalizationError(f"non-finite values at Björck iteration {k + 1}")
    return (A.T if wide else A), cache


def _bjorck_backward(grad: np.ndarray, cache: _BjorckCache, cfg: OrthoConfig) -> np.ndarray:
    G = grad.T if cache.wide else grad
    coeffs = series_coefficients(cfg.order)
    A = cache.raw / cache.scale if cache.scale != 1.0 else cache.raw
    eye = np.eye(A.shape[1])
    # rematerialize iterates rather than storing K matrices per layer
    iterates = []
    for _ in range(cfg.iters):
        Q = eye - A.T @ A
        P, powers = _poly_factor(Q, coeffs)
        iterates.append((A, P, powers))
        A = A @ P
    for A, P, powers in reversed(iterates):
        dP = A.T @ G
        dQ = np.zeros_like(dP)
        for i, c in enumerate(coeffs):
            for j in range(i):
                dQ += c * (powers[j] @ dP @ powers[i - 1 - j])
        G = G @ P - A @ (dQ + dQ.T)
    if cache.argmax_col >= 0:
        raw, s = cache.raw, cache.scale
        ds = -float(np.sum(G * raw)) / s**2
        dW = G / s
        dW[:, cache.argmax_col] += ds * cache.ninf / (2 * s) * np.sign(raw[:, cache.argmax_col])
        dW[cache.argmax_row, :] += ds * cache.n1 / (2 * s) * np.sign(raw[cache.argmax_row, :])
        G = dW
    return G.T if cache.wide else G


def bjorck_orthonormalize(W, cfg: OrthoConfig = OrthoConfig()) -> OrthoResult:
    """Drive ``W`` toward the nearest (semi-)orthonormal matrix.

    Parameters
    ----------
    W : ndarray
        Matrix of any shape. Wide matrices are handled through their transpose
        so orthonormality is enforced on the smaller dimension.
    cfg : OrthoConfig
        Iteration count, series order, tolerance and safe pre-scaling flag.

    Returns
    -------
    OrthoResult
        The final iterate, its residual ``max |G - I|``, and whether the
        residual is within ``cfg.tol``. Non-convergence is reported through
        ``converged`` rather than raised.
    """
    Wt, _ = _bjorck_forward(W, cfg)
    res = semi_orthogonality_residual(Wt)
    return OrthoResult(Wt, res, res <= cfg.tol)


def group_sort(v, group_size: int = 2) -> np.ndarray:
    """Sort consecutive groups of the last axis in ascending order."""
    v = np.asarray(v, dtype=DTYPE)
    n = v.shape[-1]
    if group_size < 1 or n % group_size:
        raise ValueError(f"length {n} is not divisible by group size {group_size}")
    grouped = v.reshape(v.shape[:-1] + (n // group_size, group_size))
    return np.sort(grouped, axis=-1).reshape(v.shape)


def _group_sort_pairs(v: np.ndarray):
    lo, hi = v[..., 0::2], v[..., 1::2]
    swap = lo > hi
    out = np.empty_like(v)
    out[..., 0::2] = np.where(swap, hi, lo)
    out[..., 1::2] = np.where(swap, lo, hi)
    return out, swap


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    scale: float = 1.0
    activation: Optional[str] = None
    orthonormalize: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.scale > 0:
            raise ValueError("layer scale must be positive")
        if self.activation == "groupsort" and self.weight.shape[0] % 2:
            raise ValueError(f"GroupSort layer needs an even width, got {self.weight.shape[0]}")

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass
class Tape:
    net: "LipschitzMLP"
    version: int
    squeeze: bool
    inputs: list = field(default_factory=list)  # layer inputs
    pre: list = field(default_factory=list)  # pre-activations
    post: list = field(default_factory=list)  # activation outputs
    sort_index: list = field(default_factory=list)


@dataclass
class Gradients:
    params: list  # aligned with LipschitzMLP.params()
    input: np.ndarray


class LipschitzMLP:
    """Stack of dense layers with global Lipschitz constant ``lipschitz``.

    With ``lipschitz=None`` the network is unconstrained: raw weights, unit
    layer scale, no certificate.
    """

    def __init__(self, layers: Sequence[DenseLayer], lipschitz: Optional[float],
                 ortho: OrthoConfig = OrthoConfig()):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer widths {prev.out_dim} -> {nxt.in_dim} do not chain")
        if lipschitz is not None and not lipschitz > 0:
            raise ValueError("Lipschitz constant must be positive")
        self.layers = list(layers)
        self.lipschitz = lipschitz
        self.ortho = ortho
        self._version = 0
        self._cache = None

    @classmethod
    def build(cls, sizes: Sequence[int], lipschitz: Optional[float], rng: SeededRng,
              final_activation: Optional[str] = None, hidden_activation: Optional[str] = None,
              ortho: OrthoConfig = OrthoConfig()) -> "LipschitzMLP":
        """Randomly initialized network with layer sizes ``sizes[0] -> ... -> sizes[-1]``.

        Constrained layers start from random (semi-)orthogonal matrices,
        unconstrained ones from He-normal weights.
        """
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if hidden_activation is None:
            hidden_activation = "groupsort" if lipschitz is not None else "relu"
        n_layers = len(sizes) - 1
        scale = lipschitz ** (1.0 / n_layers) if lipschitz is not None else 1.0
        layers = []
        for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if lipschitz is not None:
                G = rng.normal((max(d_in, d_out), min(d_in, d_out)))
                Q, R = np.linalg.qr(G)
                Q = Q * np.sign(np.diag(R))
                W = Q if d_out >= d_in else Q.T
            else:
                W = rng.normal((d_out, d_in)) * math.sqrt(2.0 / d_in)
            act = final_activation if i == n_layers - 1 else hidden_activation
            layers.append(DenseLayer(np.ascontiguousarray(W), np.zeros(d_out), scale, act,
                                     orthonormalize=lipschitz is not None))
        return cls(layers, lipschitz, ortho)

    # -- parameters ---------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def version(self) -> int:
        return self._version

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def param_names(self) -> list[str]:
        return [f"{kind}{i}" for i in range(self.depth) for kind in ("w", "b")]

    def touch(self):
        """Mark parameters as mutated; invalidates cached weights and open tapes."""
        self._version += 1
        self._cache = None

    def set_weight(self, index: int, weight, bias=None):
        layer = self.layers[index]
        weight = np.asarray(weight, dtype=DTYPE)
        if weight.shape != layer.weight.shape:
            raise ShapeError(f"weight shape {weight.shape} != {layer.weight.shape}")
        layer.weight = weight.copy()
        if bias is not None:
            layer.bias = np.asarray(bias, dtype=DTYPE).reshape(layer.bias.shape).copy()
        self.touch()

    def effective_weights(self) -> list[np.ndarray]:
        """Weights actually applied (orthonormalized for constrained layers, unscaled)."""
        return [w for w, _ in self._orthonormalized()]

    def _orthonormalized(self):
        if self._cache is None or self._cache[0] != self._version:
            entries = []
            for layer in self.layers:
                if layer.orthonormalize:
                    entries.append(_bjorck_forward(layer.weight, self.ortho))
                else:
                    entries.append((layer.weight, None))
            self._cache = (self._version, entries)
        return self._cache[1]

    # -- evaluation ---------------------------------------------------------

    def forward(self, x) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=DTYPE)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"input shape {x.shape} does not match input dimension {self.in_dim}")
        tape = Tape(self, self._version, squeeze)
        for layer, (Wt, _) in zip(self.layers, self._orthonormalized()):
            tape.inputs.append(h)
            pre = layer.scale * (h @ Wt.T) + layer.bias
            tape.pre.append(pre)
            idx = None
            if layer.activation == "groupsort":
                h, idx = _group_sort_pairs(pre)
            elif layer.activation == "relu":
                h = np.maximum(pre, 0.0)
            elif layer.activation == "sigmoid":
                h = _sigmoid(pre)
            else:
                h = pre
            tape.post.append(h)
            tape.sort_index.append(idx)
        return (h[0] if squeeze else h), tape

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: Tape, grad_out, params: bool = True) -> Gradients:
        """Reverse-mode gradients of ``sum(grad_out * output)``.

        Parameter gradients are summed over the batch; the input gradient keeps
        the batch shape of the forward input. ``params=False`` skips parameter
        gradients (``Gradients.params`` is then empty).
        """
        if tape.net is not self or tape.version != self._version:
            raise TapeError("tape was recorded before the network parameters changed")
        g = np.asarray(grad_out, dtype=DTYPE)
        if tape.squeeze:
            g = g[None, :]
        if g.shape != tape.post[-1].shape:
            raise ShapeError(f"output gradient shape {g.shape} != {tape.post[-1].shape}")
        entries = self._orthonormalized()
        grads: list = [None] * (2 * self.depth) if params else []
        for li in reversed(range(self.depth)):
            layer = self.layers[li]
            Wt, bj = entries[li]
            if layer.activation == "groupsort":
                swap = tape.sort_index[li]
                g_lo, g_hi = g[:, 0::2], g[:, 1::2]
                routed = np.empty_like(g)
                routed[:, 0::2] = np.where(swap, g_hi, g_lo)
                routed[:, 1::2] = np.where(swap, g_lo, g_hi)
                g = routed
            elif layer.activation == "relu":
                g = g * (tape.pre[li] > 0)
            elif layer.activation == "sigmoid":
                s = tape.post[li]
                g = g * s * (1.0 - s)
            if params:
                grads[2 * li + 1] = g.sum(axis=0)
                dWt = layer.scale * (g.T @ tape.inputs[li])
                grads[2 * li] = _bjorck_backward(dWt, bj, self.ortho) if bj is not None else dWt
            g = layer.scale * (g @ Wt)
        return Gradients(grads, g[0] if tape.squeeze else g)


def certified_constant(net: LipschitzMLP, tight: bool = False) -> float:
    """Certified Lipschitz constant of ``net``.

    Refuses (``CertificationError``) for unconstrained networks and for any
    layer whose orthonormalized weight misses the tolerance. With ``tight``,
    a final Sigmoid contributes its true constant 1/4.
    """
    if net.lipschitz is None:
        raise CertificationError("unconstrained network carries no certificate")
    for i, W in enumerate(net.effective_weights()):
        res = semi_orthogonality_residual(W)
        if not res <= net.ortho.tol:
            raise CertificationError(
                f"layer {i} orthonormality residual {res:.3e} exceeds tolerance {net.ortho.tol:.1e}")
    const = float(net.lipschitz)
    if tight and net.layers[-1].activation == "sigmoid":
        const *= 0.25
    return const


def empirical_lipschitz(net: LipschitzMLP, n_pairs: int, rng: SeededRng,
                        low: float = 0.0, high: float = 1.0, batch: int = 4096) -> float:
    """Largest observed ``|f(x1) - f(x2)| / |x1 - x2|`` over uniform random pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    best = 0.0
    done = 0
    while done < n_pairs:
        m = min(batch, n_pairs - done)
        x1 = rng.uniform(low, high, (m, net.in_dim))
        x2 = rng.uniform(low, high, (m, net.in_dim))
        num = np.linalg.norm(net(x1) - net(x2), axis=1)
        den = np.linalg.norm(x1 - x2, axis=1)
        ok = den > 0
        if np.any(ok):
            best = max(best, float(np.max(num[ok] / den[ok])))
        done += m
    return best
