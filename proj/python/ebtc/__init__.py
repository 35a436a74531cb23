"""Error-bounded lossy compression for time series with a learned binary-latent autoencoder."""

from ._core import (
    ArgumentError,
    DecodeError,
    DivergenceError,
    Error,
    FormatError,
    IoError,
    OverflowError,
    ParseError,
    ValidationError,
    ca_compress,
    compress,
    decode_symbols,
    decompress,
    encode_symbols,
    entropy_bound_bits,
    max_abs_error,
    qel_backward,
    qel_forward,
    quantize,
    quantize_only,
    random_walk,
    synthesize_polynomial,
)

__all__ = [
    "ArgumentError",
    "DecodeError",
    "DivergenceError",
    "Error",
    "FormatError",
    "IoError",
    "OverflowError",
    "ParseError",
    "ValidationError",
    "ca_compress",
    "compress",
    "decode_symbols",
    "decompress",
    "encode_symbols",
    "entropy_bound_bits",
    "max_abs_error",
    "qel_backward",
    "qel_forward",
    "quantize",
    "quantize_only",
    "random_walk",
    "synthesize_polynomial",
]
