"""Bit-packed xnor/popcount inference kernels and the speedup model."""

from .core import (
    GAMMA,
    PackedBitMatrix,
    PackedLinear,
    SpeedupParams,
    activation_to_signed,
    bitwise_dot,
    bitwise_matmul,
    pack,
    pack_activation_codes,
    popcount,
    precompute_q,
    quantize_pack_activations,
    row_sums,
    run_sharded,
    speedup_asymptote,
    theoretical_speedup,
    xnor_popcount_dot,
)

__all__ = [
    "GAMMA",
    "PackedBitMatrix",
    "PackedLinear",
    "SpeedupParams",
    "activation_to_signed",
    "bitwise_dot",
    "bitwise_matmul",
    "pack",
    "pack_activation_codes",
    "popcount",
    "precompute_q",
    "quantize_pack_activations",
    "row_sums",
    "run_sharded",
    "speedup_asymptote",
    "theoretical_speedup",
    "xnor_popcount_dot",
]
