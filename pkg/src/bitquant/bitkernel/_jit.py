"""Compiled inner loops: xnor/popcount GEMM, activation quantize+pack, and
the two floating-point baselines used by the benchmark."""

import numpy as np
from numba import njit
from numba.extending import intrinsic

ROW_TILE = 16
COL_TILE = 64


@intrinsic
def _ctpop(typingctx, x):
    sig = x(x)

    def codegen(context, builder, signature, args):
        return builder.ctpop(args[0])

    return sig, codegen


@njit(nogil=True, cache=True)
def popcount_words(words):
    total = 0
    for w in words.ravel():
        total += np.int64(_ctpop(w))
    return total


@njit(nogil=True, cache=True)
def bitwise_gemm(w_words, a_words, coef, q_const, n_bits, pad, out, r0, r1, passes):
    """``out[r, c] = q[r] + sum_ij coef[r, i, j] * <w_i[r], a_j[c]>`` for r in [r0, r1).

    ``w_words`` is (K_w, n, W), ``a_words`` is (K_a, m, W), plane-major.
    Each (tile, i, j) visit is one plane-pair pass, counted in ``passes[0]``.
    """
    k_w, _, n_words = w_words.shape
    k_a, m, _ = a_words.shape
    acc = np.zeros((ROW_TILE, COL_TILE), dtype=np.float64)
    for rt in range(r0, r1, ROW_TILE):
        re = min(rt + ROW_TILE, r1)
        for ct in range(0, m, COL_TILE):
            ce = min(ct + COL_TILE, m)
            acc[:, :] = 0.0
            for i in range(k_w):
                for j in range(k_a):
                    passes[0] += 1
                    for r in range(rt, re):
                        c_ij = coef[r, i, j]
                        wrow = w_words[i, r]
                        for c in range(ct, ce):
                            arow = a_words[j, c]
                            cnt = 0
                            for t in range(n_words):
                                cnt += np.int64(_ctpop(~(wrow[t] ^ arow[t])))
                            # pads are zero in both operands, so xnor sets them
                            dot = 2 * (cnt - pad) - n_bits
                            acc[r - rt, c - ct] += c_ij * dot
            for r in range(rt, re):
                for c in range(ct, ce):
                    out[r, c] = q_const[r] + acc[r - rt, c - ct]


@njit(nogil=True, cache=True)
def quantize_pack(a, levels, codes, bit_table, words, c0, c1):
    """Nearest-level encode rows ``a[c]`` (c in [c0, c1)) and set code bits.

    ``words`` is (K, m, W) and must be zero on entry; ``bit_table[b]`` is
    ``1 << b`` in the word dtype. Ties go to the lower level index.
    """
    n_levels, k = codes.shape
    p = a.shape[1]
    word_bits = bit_table.shape[0]
    for c in range(c0, c1):
        for t in range(p):
            x = a[c, t]
            best = 0
            best_d = (x - levels[0]) * (x - levels[0])
            for li in range(1, n_levels):
                d = (x - levels[li]) * (x - levels[li])
                if d < best_d:
                    best_d = d
                    best = li
            w = t // word_bits
            b = t % word_bits
            for j in range(k):
                if codes[best, j]:
                    words[j, c, w] |= bit_table[b]


@njit(nogil=True, cache=True)
def naive_fp(w, a, out, r0, r1):
    """Scalar triple loop, ``out = w @ a.T``; strict FP order (no SIMD reduction)."""
    p = w.shape[1]
    m = a.shape[0]
    for r in range(r0, r1):
        for c in range(m):
            s = np.float32(0.0)
            for t in range(p):
                s += w[r, t] * a[c, t]
            out[r, c] = s


@njit(nogil=True, cache=True, fastmath=True)
def blocked_fp(w, a, out, r0, r1):
    """Cache-blocked ``out = w @ a.T``; fastmath lets the inner reduction vectorize."""
    p = w.shape[1]
    m = a.shape[0]
    kb_size = 512
    cb_size = 64
    for r in range(r0, r1):
        for c in range(m):
            out[r, c] = 0.0
    for cb in range(0, m, cb_size):
        ce = min(cb + cb_size, m)
        for kb in range(0, p, kb_size):
            ke = min(kb + kb_size, p)
            for r in range(r0, r1):
                for c in range(cb, ce):
                    s = np.float32(0.0)
                    for t in range(kb, ke):
                        s += w[r, t] * a[c, t]
                    out[r, c] += s
