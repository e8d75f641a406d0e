"""Low bit-width training (learned quantized weights, channel-averaged activation
quantizers) and bit-packed xnor/popcount inference."""

__version__ = "0.1.0"
