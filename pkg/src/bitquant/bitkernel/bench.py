"""Timing harness comparing bitwise MatMul with two floating-point MatMuls.

Every kernel's output is checked against a float64 dense oracle before any
timing is recorded. The bitwise kernel is timed end to end, including
quantizing and packing the float activations.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ParameterError, VerificationError
from ..quantizer_core import quantize, uniform_basis
from . import _jit
from .core import PackedLinear, bitwise_matmul, quantize_pack_activations, run_sharded

CSV_FIELDS = ["kernel", "k_w", "k_a", "c_i", "threads", "mean_ms", "std_ms", "speedup_vs_naive"]
FP_BITS = 32
DEFAULT_CI_SWEEP = (32, 64, 128, 256, 512, 1024, 2048, 4096)


@dataclass
class BenchConfig:
    n: int = 256
    m: int = 14 * 14 * 100
    kernel_size: int = 3
    c_i_sweep: Sequence[int] = DEFAULT_CI_SWEEP
    bits: Sequence[tuple] = ((1, 1), (2, 2))
    threads: Sequence[int] = (1,)
    reps: int = 5
    seed: int = 0
    word_bits: int = 64
    kernels: Sequence[str] = ("naive", "blocked", "bitwise")
    rtol: float = 1e-4

    def __post_init__(self):
        if self.reps < 3:
            raise ParameterError(f"at least 3 repetitions are required, got {self.reps}")
        if min(self.n, self.m, self.kernel_size) < 1 or min(self.c_i_sweep) < 1:
            raise ParameterError("sizes must be positive")
        if min(self.threads) < 1:
            raise ParameterError("thread counts must be positive")
        unknown = set(self.kernels) - {"naive", "blocked", "bitwise"}
        if unknown:
            raise ParameterError(f"unknown kernels: {sorted(unknown)}")


@dataclass
class TimingRecord:
    kernel: str
    k_w: int
    k_a: int
    c_i: int
    threads: int
    samples_ms: list = field(default_factory=list)
    speedup_vs_naive: float = float("nan")
    max_rel_dev: float = float("nan")

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def std_ms(self) -> float:
        return float(np.std(self.samples_ms, ddof=1)) if len(self.samples_ms) > 1 else 0.0

    def row(self) -> list:
        return [self.kernel, self.k_w, self.k_a, self.c_i, self.threads,
                f"{self.mean_ms:.4f}", f"{self.std_ms:.4f}", f"{self.speedup_vs_naive:.4f}"]


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def time_call(fn: Callable[[], object], reps: int, check: Optional[Callable[[object], None]] = None):
    """One warmup call, then ``reps`` timed calls on a monotonic clock.

    ``check`` receives the warmup result and may raise to abort before any
    timing. Returns the warmup result and the samples in milliseconds.
    """
    result = fn()
    if check is not None:
        check(result)
    samples = []
    try:
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1e3)
    except OSError as exc:  # pragma: no cover - timer failures are platform specific
        raise RuntimeError(f"timer failure: {exc}") from exc
    return result, samples


def _gate(name: str, rtol: float, reference: Callable[[np.ndarray], float]):
    dev = []

    def check(out):
        d = reference(out)
        if not d < rtol:
            raise VerificationError(f"{name} MatMul deviates from oracle by {d:.3g}")
        dev.append(d)
    return check, dev


def max_rel_deviation(out: np.ndarray, w: np.ndarray, a: np.ndarray, chunk: int = 2048) -> float:
    """``max |out - w a^T| / (|w| |a|^T)`` computed in float64, column-chunked.

    The denominator is the sum of absolute products, the natural scale of
    rounding error for a dot product; exact-zero scales are skipped.
    """
    w64 = w.astype(np.float64)
    aw = np.abs(w64)
    worst = 0.0
    for c0 in range(0, a.shape[0], chunk):
        a64 = a[c0:c0 + chunk].astype(np.float64)
        ref = w64 @ a64.T
        scale = aw @ np.abs(a64).T
        diff = np.abs(out[:, c0:c0 + chunk].astype(np.float64) - ref)
        nz = scale > 0
        if np.any(diff[~nz] > 0):
            return float("inf")
        if np.any(nz):
            worst = max(worst, float(np.max(diff[nz] / scale[nz])))
    return worst


def fp_matmul(kind: str, w: np.ndarray, a: np.ndarray, threads: int = 1) -> np.ndarray:
    kernel = {"naive": _jit.naive_fp, "blocked": _jit.blocked_fp}[kind]
    out = np.empty((w.shape[0], a.shape[0]), dtype=np.float32)
    run_sharded(lambda r0, r1: kernel(w, a, out, r0, r1), w.shape[0], threads)
    return out


def make_problem(n: int, m: int, p: int, k_w: int, k_a: int, rng: np.random.Generator):
    """Random packed weights, their dense form, and non-negative float activations."""
    signs = rng.choice(np.array([-1, 1], dtype=np.int8), size=(n, p, k_w))
    v_w = np.abs(rng.normal(size=(n, k_w))) / np.sqrt(p)
    acts = np.maximum(rng.standard_normal((m, p), dtype=np.float32), 0)
    v_a = uniform_basis(2.0, k_a)
    layer = PackedLinear.from_codes(signs, v_w, v_a)
    return layer, acts


def bench_matmul(cfg: BenchConfig, log: Callable[[str], None] = lambda s: None) -> list:
    """Gate then time each kernel over the configured sweep.

    The first call of each kernel is checked against the float64 oracle;
    a mismatch raises :class:`VerificationError` before any sample is taken.
    """
    rng = np.random.default_rng(cfg.seed)
    records = []
    for c_i in cfg.c_i_sweep:
        p = cfg.kernel_size * cfg.kernel_size * c_i
        for k_w, k_a in cfg.bits:
            layer, acts = make_problem(cfg.n, cfg.m, p, k_w, k_a, rng)
            w64 = layer.dense_weights()
            w_dense = w64.astype(np.float32)
            for threads in cfg.threads:
                batch = []
                # float kernels do not depend on bit-widths: time them once per (c_i, threads)
                fp_kernels = [k for k in ("naive", "blocked") if k in cfg.kernels] \
                    if (k_w, k_a) == tuple(cfg.bits[0]) else []
                for kind in fp_kernels:
                    check, dev = _gate(kind, cfg.rtol, lambda out: max_rel_deviation(out, w_dense, acts))
                    _, samples = time_call(lambda: fp_matmul(kind, w_dense, acts, threads), cfg.reps, check)
                    rec = TimingRecord(kind, FP_BITS, FP_BITS, c_i, threads, samples, max_rel_dev=dev[0])
                    batch.append(rec)
                    log(f"c_i={c_i} {kind} threads={threads}: {rec.mean_ms:.2f} ms")
                if "bitwise" in cfg.kernels:
                    def run():
                        packed = quantize_pack_activations(acts, layer.v_a, cfg.word_bits, threads)
                        return bitwise_matmul(layer, packed, threads=threads)

                    acts_q = quantize(acts, layer.v_a)
                    check, dev = _gate("bitwise", cfg.rtol, lambda out: max_rel_deviation(out, w64, acts_q))
                    _, samples = time_call(run, cfg.reps, check)
                    rec = TimingRecord("bitwise", k_w, k_a, c_i, threads, samples, max_rel_dev=dev[0])
                    batch.append(rec)
                    log(f"c_i={c_i} bitwise {k_w}/{k_a} threads={threads}: {rec.mean_ms:.2f} ms")
                records.extend(batch)
        # speedups relative to the naive kernel at the same (c_i, threads)
        naive = {r.threads: r.mean_ms for r in records if r.c_i == c_i and r.kernel == "naive"}
        for r in records:
            if r.c_i == c_i and r.threads in naive:
                r.speedup_vs_naive = naive[r.threads] / r.mean_ms
    return records
