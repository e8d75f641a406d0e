"""Bit-packed operands and the xnor/popcount dot-product identity.

With weights ``W = sum_i v_w[i] s_i`` (``s_i`` in {-1,+1}^N) and activations
``A = sum_j v_a[j] b_j`` (``b_j`` in {0,1}^N), substituting
``b_j = (t_j + 1) / 2`` gives

    W . A = Q + sum_ij (v_w[i] v_a[j] / 2) <s_i, t_j>,
    Q     = sum_ij (v_w[i] v_a[j] / 2) sum(s_i),

where every ``<., .>`` over {-1,+1} is ``2 * popcount(xnor) - N``.
Packed layout: bit 1 stands for +1; element ``t`` of a vector lives in
word ``t // L`` at bit ``t % L``; pad bits are zero.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import AlphabetError, ParameterError, ShapeError
from ..quantizer_core import Encoding, as_basis, code_table, quant_levels
from . import _jit

GAMMA = 1.91

_WORD_DTYPE = {32: np.dtype("<u4"), 64: np.dtype("<u8")}


def _word_dtype(word_bits: int) -> np.dtype:
    try:
        return _WORD_DTYPE[word_bits]
    except KeyError:
        raise ParameterError(f"word_bits must be 32 or 64, got {word_bits}") from None


@dataclass
class PackedBitMatrix:
    """``V`` vectors of ``length`` elements with ``K`` bit planes each.

    ``words`` has shape ``(K, V, words_per_vector)``: all words of one
    plane are contiguous.
    """

    words: np.ndarray
    length: int
    word_bits: int = 64

    @property
    def planes(self) -> int:
        return self.words.shape[0]

    @property
    def vectors(self) -> int:
        return self.words.shape[1]

    @property
    def words_per_vector(self) -> int:
        return self.words.shape[2]

    @property
    def pad(self) -> int:
        return self.words_per_vector * self.word_bits - self.length

    def unpack(self) -> np.ndarray:
        """Signed codes of shape ``(V, N, K)``."""
        raw = np.ascontiguousarray(self.words).view(np.uint8)
        bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., :self.length]
        return np.moveaxis(bits.astype(np.int8) * 2 - 1, 0, -1)

    def row(self, i: int) -> "PackedBitMatrix":
        return PackedBitMatrix(self.words[:, i:i + 1], self.length, self.word_bits)


def _signed_array(enc) -> np.ndarray:
    if isinstance(enc, Encoding):
        if enc.convention != "signed":
            raise AlphabetError("packing needs a {-1,+1} encoding; convert activations first")
        bits = enc.bits
    else:
        bits = np.asarray(enc)
    if not np.all((bits == 1) | (bits == -1)):
        raise AlphabetError("packed operands must be over {-1, +1}")
    return bits


def pack(enc, word_bits: int = 64) -> PackedBitMatrix:
    """Pack signed codes ``(N, K)`` or ``(V, N, K)`` into plane-major words."""
    bits = _signed_array(enc)
    if bits.ndim == 2:
        bits = bits[None]
    if bits.ndim != 3:
        raise ShapeError(f"expected (N, K) or (V, N, K) codes, got shape {bits.shape}")
    dtype = _word_dtype(word_bits)
    v, n, k = bits.shape
    n_words = max(1, math.ceil(n / word_bits))
    plane = np.zeros((k, v, n_words * word_bits), dtype=np.uint8)
    plane[:, :, :n] = np.moveaxis(bits > 0, -1, 0)
    packed = np.packbits(plane, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view(dtype)
    return PackedBitMatrix(words=words, length=n, word_bits=word_bits)


def activation_to_signed(enc01) -> Encoding:
    """Map {0,1} activation codes to {-1,+1}: ``0 -> -1``, ``1 -> +1``."""
    bits = enc01.bits if isinstance(enc01, Encoding) else np.asarray(enc01)
    if isinstance(enc01, Encoding) and enc01.convention != "binary":
        raise AlphabetError("expected a {0,1} encoding")
    if not np.all((bits == 0) | (bits == 1)):
        raise AlphabetError("activation codes must be over {0, 1}")
    signed = bits.astype(np.int8) * 2 - 1
    if signed.ndim == 2:
        return Encoding(signed, convention="signed")
    return signed


def popcount(words: np.ndarray) -> int:
    return int(np.bitwise_count(words).sum(dtype=np.int64))


def xnor_popcount_dot(x: np.ndarray, y: np.ndarray, n: int, word_bits: int = 64) -> int:
    """Signed dot product of two packed rows of ``n`` elements."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"packed rows differ in shape: {x.shape} vs {y.shape}")
    if x.size * word_bits < n or (x.size - 1) * word_bits >= max(n, 1):
        raise ShapeError(f"{x.size} words of {word_bits} bits cannot hold exactly {n} elements")
    pad = x.size * word_bits - n
    agree = popcount(np.invert(x ^ y)) - pad
    return 2 * agree - n


def row_sums(w: PackedBitMatrix) -> np.ndarray:
    """Sum of signed entries per (plane, vector): ``2 * popcount - N``."""
    counts = np.bitwise_count(w.words).sum(axis=-1, dtype=np.int64)
    return 2 * counts - w.length


def precompute_q(w: PackedBitMatrix, v_w, v_a) -> np.ndarray:
    """Constant offset per weight row: ``sum_ij v_w[i] v_a[j] / 2 * sum(s_i)``.

    ``v_w`` is ``(K_w,)`` shared by all rows or ``(V, K_w)`` per row.
    Returns one value per row.
    """
    v_w = np.asarray(v_w, dtype=np.float64)
    v_a = as_basis(v_a)
    if v_w.shape[-1] != w.planes:
        raise ShapeError(f"weight basis has {v_w.shape[-1]} entries for {w.planes} planes")
    v_w = np.broadcast_to(v_w, (w.vectors, w.planes))
    sums = row_sums(w).T  # (V, K_w)
    return 0.5 * v_a.sum() * np.einsum("vi,vi->v", v_w, sums.astype(np.float64))


def bitwise_dot(w_row: PackedBitMatrix, v_w, q_const: float, a_col: PackedBitMatrix, v_a) -> float:
    """Dot product of one quantized weight row with one quantized activation column."""
    v_w = np.asarray(v_w, dtype=np.float64).reshape(-1)
    v_a = as_basis(v_a)
    if w_row.length != a_col.length or w_row.word_bits != a_col.word_bits:
        raise ShapeError("weight row and activation column differ in length or word size")
    if w_row.vectors != 1 or a_col.vectors != 1:
        raise ShapeError("bitwise_dot takes a single row and a single column")
    if v_w.size != w_row.planes or v_a.size != a_col.planes:
        raise ShapeError("basis lengths must match the number of bit planes")
    total = float(np.asarray(q_const).reshape(-1)[0])
    for i in range(w_row.planes):
        for j in range(a_col.planes):
            d = xnor_popcount_dot(w_row.words[i, 0], a_col.words[j, 0], w_row.length, w_row.word_bits)
            total += 0.5 * v_w[i] * v_a[j] * d
    return total


@dataclass
class PackedLinear:
    """A quantized weight matrix ready for bitwise inference.

    ``weights`` holds ``n`` rows of ``p`` elements with ``K_w`` planes;
    ``v_w`` is ``(n, K_w)``; ``v_a`` is the activation basis the Q constants
    were computed for.
    """

    weights: PackedBitMatrix
    v_w: np.ndarray
    v_a: np.ndarray
    q_const: np.ndarray

    @classmethod
    def from_codes(cls, signs: np.ndarray, v_w, v_a, word_bits: int = 64) -> "PackedLinear":
        """``signs`` is ``(n, p, K_w)`` over {-1,+1}."""
        packed = pack(signs, word_bits)
        v_w = np.broadcast_to(np.asarray(v_w, dtype=np.float64), (packed.vectors, packed.planes)).copy()
        v_a = as_basis(v_a)
        return cls(packed, v_w, v_a, precompute_q(packed, v_w, v_a))

    @property
    def n(self) -> int:
        return self.weights.vectors

    @property
    def p(self) -> int:
        return self.weights.length

    @property
    def k_w(self) -> int:
        return self.weights.planes

    @property
    def k_a(self) -> int:
        return self.v_a.size

    @property
    def word_bits(self) -> int:
        return self.weights.word_bits

    def dense_weights(self) -> np.ndarray:
        return np.einsum("npk,nk->np", self.weights.unpack().astype(np.float64), self.v_w)


def _shards(n: int, threads: int):
    threads = max(1, min(threads, n))
    bounds = np.linspace(0, n, threads + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def run_sharded(fn, n_rows: int, threads: int) -> None:
    """Call ``fn(r0, r1)`` over contiguous row shards, one worker thread each."""
    shards = _shards(n_rows, threads)
    if len(shards) == 1:
        fn(*shards[0])
        return
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        for f in [pool.submit(fn, r0, r1) for r0, r1 in shards]:
            f.result()


def bitwise_matmul(layer: PackedLinear, acts: PackedBitMatrix, *, out_dtype=np.float32,
                   threads: int = 1, stats: Optional[dict] = None) -> np.ndarray:
    """``n x m`` product of packed weights with ``m`` packed signed activation columns.

    Integer popcount sums are combined in double precision; ``out_dtype``
    only sets the returned precision. ``stats`` (if given) receives the
    number of plane-pair passes and output tiles.
    """
    w = layer.weights
    if acts.length != w.length or acts.word_bits != w.word_bits:
        raise ShapeError(f"inner dimensions differ: weights {w.length}, activations {acts.length}")
    if acts.planes != layer.k_a:
        raise ShapeError(f"activations have {acts.planes} planes, basis has {layer.k_a} entries")
    coef = 0.5 * layer.v_w[:, :, None] * layer.v_a[None, None, :]
    out = np.empty((w.vectors, acts.vectors), dtype=np.float64)
    passes = {}

    def work(r0, r1):
        counter = np.zeros(1, dtype=np.int64)
        _jit.bitwise_gemm(w.words, acts.words, coef, layer.q_const, w.length, w.pad,
                          out, r0, r1, counter)
        passes[r0] = int(counter[0])

    run_sharded(work, w.vectors, threads)
    if stats is not None:
        stats["plane_pair_passes"] = sum(passes.values())
        stats["tiles"] = sum(math.ceil((r1 - r0) / _jit.ROW_TILE) for r0, r1 in _shards(w.vectors, threads)) \
            * math.ceil(acts.vectors / _jit.COL_TILE)
    return out.astype(out_dtype, copy=False)


def quantize_pack_activations(a: np.ndarray, v_a, word_bits: int = 64, threads: int = 1) -> PackedBitMatrix:
    """Quantize ``m`` activation vectors ``a`` (shape ``(m, p)``) to the nearest
    level of ``v_a`` and pack their codes as signed planes."""
    a = np.ascontiguousarray(a)
    if a.ndim != 2:
        raise ShapeError(f"expected (m, p) activations, got shape {a.shape}")
    ql = quant_levels(v_a)
    dtype = _word_dtype(word_bits)
    m, p = a.shape
    words = np.zeros((ql.k, m, max(1, math.ceil(p / word_bits))), dtype=dtype)
    bit_table = np.left_shift(np.ones(word_bits, dtype=dtype), np.arange(word_bits, dtype=dtype))
    codes = np.ascontiguousarray(ql.codes)
    run_sharded(lambda c0, c1: _jit.quantize_pack(a, ql.levels, codes, bit_table, words, c0, c1),
                m, threads)
    return PackedBitMatrix(words, p, word_bits)


def pack_activation_codes(index: np.ndarray, k_a: int, word_bits: int = 64) -> PackedBitMatrix:
    """Pack integer level indices ``(m, p)`` as signed bit planes."""
    bits01 = code_table(k_a)[np.asarray(index)]
    return pack(bits01.astype(np.int8) * 2 - 1, word_bits)


@dataclass(frozen=True)
class SpeedupParams:
    k_w: int
    k_a: int
    q: int
    L: int = 64
    gamma: float = GAMMA

    def __post_init__(self):
        if self.k_w < 1 or self.k_a < 1 or self.q < 1 or self.L < 1 or self.gamma < 0:
            raise ParameterError("speedup parameters must be positive")


def theoretical_speedup(sp: SpeedupParams) -> float:
    """Ideal bitwise-over-MAC speedup of one dot product of length ``q``."""
    kk = sp.k_w * sp.k_a
    denom = sp.gamma * kk + 2 * kk * math.ceil(sp.q / sp.L)
    return sp.gamma * sp.q / denom


def speedup_asymptote(sp: SpeedupParams) -> float:
    return sp.gamma * sp.L / (2 * sp.k_w * sp.k_a)
