"""Scalar quantizers fitted by alternating nearest-level assignment and
least-squares basis updates, and the channel-wise averaged activation
quantizer (CAQ) built on top of them.

A basis ``v`` of length ``K`` induces ``2**K`` levels ``<dec2bin(i, K), v>``.
Bases are kept unsorted; level search is always over level values.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from numba import njit

from .errors import (
    AlphabetError,
    NumericError,
    ParameterError,
    RangeError,
    ShapeError,
    StateError,
)

RIDGE = 1e-10  # Tikhonov term for singular normal equations
EMPTY_CHANNEL_INIT = 1e-3
_CHUNK = 1 << 20


@dataclass(frozen=True)
class BitConfig:
    k_w: int = 2
    k_a: int = 2
    word_bits: int = 64

    def __post_init__(self):
        for name in ("k_w", "k_a"):
            k = getattr(self, name)
            if not isinstance(k, (int, np.integer)) or not 1 <= k <= 8:
                raise ParameterError(f"{name} must be an integer in [1, 8], got {k!r}")
        if self.word_bits not in (32, 64):
            raise ParameterError(f"word_bits must be 32 or 64, got {self.word_bits!r}")


@dataclass(frozen=True)
class QuantLevels:
    levels: np.ndarray  # (2**K,)
    codes: np.ndarray  # (2**K, K) in {0, 1}

    @property
    def k(self) -> int:
        return self.codes.shape[1]


@dataclass
class Encoding:
    """Per-element K-bit codes.

    ``bits`` is ``(N, K)`` over {0, 1} for ``convention="binary"`` (activations)
    or over {-1, +1} for ``convention="signed"`` (weights).
    """

    bits: np.ndarray
    convention: str = "binary"

    def __post_init__(self):
        if self.convention not in ("binary", "signed"):
            raise AlphabetError(f"unknown convention {self.convention!r}")
        if self.bits.ndim != 2:
            raise ShapeError(f"encoding must be 2-D (N, K), got shape {self.bits.shape}")

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @property
    def k(self) -> int:
        return self.bits.shape[1]

    def index(self) -> np.ndarray:
        """Integer code index per row (binary convention only)."""
        if self.convention != "binary":
            raise AlphabetError("index() is defined for binary encodings")
        weights = 1 << np.arange(self.k)
        return self.bits.astype(np.int64) @ weights


def as_basis(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 1:
        raise ShapeError("a basis needs at least one entry")
    if not np.all(np.isfinite(v)):
        raise NumericError("basis entries must be finite")
    return v


def dec2bin(i: int, k: int) -> np.ndarray:
    """K-bit binary expansion of ``i``, least-significant bit first.

    ``dec2bin(6, 3) == [0, 1, 1]``: entry ``b`` is the coefficient of ``2**b``.
    """
    if k < 1:
        raise RangeError(f"bit count must be >= 1, got {k}")
    if not 0 <= i < (1 << k):
        raise RangeError(f"{i} is outside [0, 2**{k})")
    return np.array([(i >> b) & 1 for b in range(k)], dtype=np.uint8)


@lru_cache(maxsize=None)
def _code_table(k: int) -> np.ndarray:
    idx = np.arange(1 << k)[:, None]
    table = ((idx >> np.arange(k)) & 1).astype(np.uint8)
    table.setflags(write=False)
    return table


def code_table(k: int) -> np.ndarray:
    """All ``2**k`` codes in index order, shape ``(2**k, k)``."""
    return _code_table(int(k))


def _levels(codes: np.ndarray, v: np.ndarray) -> np.ndarray:
    # summed entry by entry so every level equals the plain dot product exactly
    out = np.zeros(codes.shape[0])
    for b in range(codes.shape[1]):
        out += codes[:, b] * v[b]
    return out


def quant_levels(basis) -> QuantLevels:
    v = as_basis(basis)
    codes = code_table(v.size)
    return QuantLevels(levels=_levels(codes, v), codes=codes)


@njit(cache=True, nogil=True)
def _nearest_loop(a, levels, out):
    for t in range(a.size):
        x = a[t]
        best = 0
        best_d = (x - levels[0]) ** 2
        for li in range(1, levels.size):
            d = (x - levels[li]) ** 2
            if d < best_d:
                best_d = d
                best = li
        out[t] = best


def nearest_index(a: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the nearest level for each element of flat ``a``.

    Ties go to the lower level index.
    """
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    levels = np.ascontiguousarray(levels, dtype=np.float64).reshape(-1)
    out = np.empty(a.size, dtype=np.int64)
    _nearest_loop(a, levels, out)
    return out


def nearest_index_bruteforce(a, levels) -> np.ndarray:
    """Reference search: squared distance to every level, first minimum wins."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    levels = np.asarray(levels, dtype=np.float64).reshape(-1)
    out = np.empty(a.size, dtype=np.int64)
    step = max(1, _CHUNK // levels.size)
    for lo in range(0, a.size, step):
        chunk = a[lo:lo + step]
        out[lo:lo + step] = np.argmin((chunk[:, None] - levels[None, :]) ** 2, axis=1)
    return out


def encode_nearest(a, levels: QuantLevels) -> Encoding:
    idx = nearest_index(a, levels.levels)
    return Encoding(bits=levels.codes[idx].copy(), convention="binary")


def quantize(a, basis) -> np.ndarray:
    """Replace every element of ``a`` by its nearest level; keeps shape and dtype."""
    a = np.asarray(a)
    ql = quant_levels(basis)
    idx = nearest_index(a, ql.levels)
    dtype = a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64
    return ql.levels[idx].reshape(a.shape).astype(dtype, copy=False)


def _solve_normal(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    k = gram.shape[0]
    return np.linalg.solve(gram + RIDGE * np.eye(k), rhs)


def basis_ls_update(enc: Encoding, a) -> np.ndarray:
    """Least-squares basis for a fixed {0,1} encoding: ``(S^T S)^-1 S^T a``.

    A ridge of ``RIDGE`` keeps the solve defined when ``S^T S`` is singular;
    a column that is never selected gets a zero entry.
    """
    if enc.convention != "binary":
        raise AlphabetError("basis_ls_update expects a {0,1} encoding")
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size != enc.n:
        raise ShapeError(f"encoding has {enc.n} rows but signal has {a.size} elements")
    s = enc.bits.astype(np.float64)
    return _solve_normal(s.T @ s, s.T @ a)


def _ls_from_index(a: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    # S^T S and S^T a accumulated per code instead of materializing S
    codes = code_table(k).astype(np.float64)
    counts = np.bincount(idx, minlength=1 << k).astype(np.float64)
    sums = np.bincount(idx, weights=a, minlength=1 << k)
    gram = codes.T @ (counts[:, None] * codes)
    return _solve_normal(gram, codes.T @ sums)


def _sq_error(a: np.ndarray, levels: np.ndarray, idx: np.ndarray) -> float:
    r = a - levels[idx]
    return float(r @ r)


@dataclass
class ScalarFit:
    basis: np.ndarray
    encoding: Encoding
    error: float
    history: list = field(default_factory=list)  # objective after each round
    converged: bool = False


def uniform_basis(upper: float, k: int) -> np.ndarray:
    """Basis whose levels are evenly spaced over ``[0, upper]``."""
    if upper <= 0:
        return np.full(k, EMPTY_CHANNEL_INIT)
    step = upper / ((1 << k) - 1)
    return step * (2.0 ** np.arange(k))


def fit_scalar_quantizer(a, k: int, iters: int, init=None, *, tol: Optional[float] = None) -> ScalarFit:
    """Alternate nearest-level encoding and least-squares basis updates.

    Runs ``iters`` rounds (assignment then basis update). With ``tol`` set,
    stops early once a round leaves the encoding unchanged and moves the
    basis by at most ``tol``. The returned encoding comes from a final
    assignment pass against the returned basis.
    """
    if iters < 1:
        raise ParameterError(f"iteration count must be >= 1, got {iters}")
    if k < 1:
        raise ParameterError(f"bit count must be >= 1, got {k}")
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise NumericError("signal contains non-finite values")
    v = uniform_basis(float(a.max(initial=0.0)), k) if init is None else as_basis(init)
    if v.size != k:
        raise ShapeError(f"init basis has {v.size} entries, expected {k}")

    codes = code_table(k)
    history = []
    prev_idx = None
    converged = False
    for _ in range(iters):
        idx = nearest_index(a, _levels(codes, v))
        v_new = _ls_from_index(a, idx, k)
        history.append(_sq_error(a, _levels(codes, v_new), idx))
        if tol is not None and prev_idx is not None and np.array_equal(idx, prev_idx) \
                and np.max(np.abs(v_new - v)) <= tol:
            v = v_new
            converged = True
            break
        prev_idx = idx
        v = v_new

    levels = _levels(codes, v)
    idx = nearest_index(a, levels)
    enc = Encoding(bits=codes[idx].copy(), convention="binary")
    return ScalarFit(basis=v, encoding=enc, error=_sq_error(a, levels, idx),
                     history=history, converged=converged)


def fit_until_converged(a, k: int, init=None, max_iters: int = 500, tol: float = 1e-12) -> ScalarFit:
    return fit_scalar_quantizer(a, k, max_iters, init, tol=tol)


# --- channel-wise averaged quantizer -------------------------------------------------

@dataclass
class ActQuantState:
    channel_count: int
    k: int
    mu: float = 0.9
    iters: int = 1
    channel_bases: Optional[np.ndarray] = None  # (C, K)
    averaged: Optional[np.ndarray] = None  # (K,)

    def __post_init__(self):
        if self.channel_count < 1:
            raise ParameterError("channel_count must be >= 1")
        if not 1 <= self.k <= 8:
            raise ParameterError(f"bit count must be in [1, 8], got {self.k}")
        if not 0.0 <= self.mu <= 1.0:
            raise ParameterError(f"mu must lie in [0, 1], got {self.mu}")
        if self.iters < 1:
            raise ParameterError("iters must be >= 1")
        if self.channel_bases is not None:
            self.channel_bases = np.asarray(self.channel_bases, dtype=np.float64)
            if self.channel_bases.shape != (self.channel_count, self.k):
                raise ShapeError(
                    f"channel_bases shape {self.channel_bases.shape} != ({self.channel_count}, {self.k})")
            self.averaged = self.channel_bases.mean(axis=0)

    @property
    def initialized(self) -> bool:
        return self.channel_bases is not None

    def copy(self) -> "ActQuantState":
        return ActQuantState(self.channel_count, self.k, self.mu, self.iters,
                             None if self.channel_bases is None else self.channel_bases.copy())


def _channels(a: np.ndarray, channel_count: int) -> np.ndarray:
    if a.ndim < 2:
        raise ShapeError(f"expected a (B, C, ...) tensor, got shape {a.shape}")
    if a.shape[1] != channel_count:
        raise ShapeError(f"tensor has {a.shape[1]} channels, state expects {channel_count}")
    return np.moveaxis(a, 1, 0).reshape(channel_count, -1).astype(np.float64)


def caq_train_step(a, state: ActQuantState) -> np.ndarray:
    """One training-stage forward pass of the channel-wise averaged quantizer.

    Mutates ``state``: every non-empty channel runs ``state.iters`` alternating
    rounds from its stored basis, then the EMA blends the result back in.
    Output is quantized with the post-EMA averaged basis.
    """
    a = np.asarray(a)
    x = _channels(a, state.channel_count)
    if np.any(x < 0):
        raise ParameterError("CAQ expects non-negative (post-ReLU) activations")
    if not np.all(np.isfinite(x)):
        raise NumericError("activation contains non-finite values")
    if not state.initialized:
        state.channel_bases = np.stack([uniform_basis(float(row.max()), state.k) for row in x])

    codes = code_table(state.k)
    for j, row in enumerate(x):
        if not row.any():
            continue
        v = state.channel_bases[j]
        for _ in range(state.iters):
            v = _ls_from_index(row, nearest_index(row, _levels(codes, v)), state.k)
        state.channel_bases[j] = (1.0 - state.mu) * v + state.mu * state.channel_bases[j]
    state.averaged = state.channel_bases.mean(axis=0)
    return quantize(a, state.averaged)


def caq_infer(a, state: ActQuantState) -> np.ndarray:
    if state.averaged is None:
        raise StateError("activation quantizer has not been trained")
    return quantize(a, state.averaged)


def ste_activation_backward(grad_out, debug: bool = False) -> np.ndarray:
    """Straight-through gradient: identity. ``debug`` rejects non-finite input."""
    if debug and not np.all(np.isfinite(grad_out)):
        raise NumericError("non-finite gradient reached the activation quantizer")
    return grad_out


def fit_caq(a, k: int, mu: float = 0.9, iters: int = 1, max_steps: int = 2000,
            tol: float = 1e-12) -> ActQuantState:
    """Run CAQ training steps on a fixed tensor until the averaged basis settles."""
    a = np.asarray(a)
    state = ActQuantState(channel_count=a.shape[1], k=k, mu=mu, iters=iters)
    prev = None
    for _ in range(max_steps):
        caq_train_step(a, state)
        if prev is not None and np.max(np.abs(state.averaged - prev)) <= tol:
            break
        prev = state.averaged.copy()
    return state


@dataclass
class ChannelReport:
    mse_caq: np.ndarray
    mse_global: np.ndarray

    @property
    def rel_change_pct(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = 100.0 * (self.mse_caq - self.mse_global) / self.mse_global
        same = self.mse_caq == self.mse_global
        rel[same] = 0.0
        rel[~same & (self.mse_global == 0)] = np.inf
        return rel

    @property
    def improved(self) -> int:
        return int(np.sum(self.mse_caq < self.mse_global))

    @property
    def channels(self) -> int:
        return self.mse_caq.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "mse_caq", "mse_global", "rel_change_pct"])
        for j, (c, g, r) in enumerate(zip(self.mse_caq, self.mse_global, self.rel_change_pct)):
            w.writerow([j, repr(float(c)), repr(float(g)), repr(float(r))])
        return buf.getvalue()


def channel_mse_report(a, basis_global, state: ActQuantState) -> ChannelReport:
    """Per-channel MSE under the CAQ averaged basis versus one global basis."""
    a = np.asarray(a)
    x = _channels(a, state.channel_count)
    if state.averaged is None:
        raise StateError("activation quantizer has not been trained")
    mse = []
    for basis in (state.averaged, as_basis(basis_global)):
        q = quantize(x, basis)
        mse.append(np.mean((x - q) ** 2, axis=1))
    return ChannelReport(mse_caq=mse[0], mse_global=mse[1])
