"""Weight-decomposed low-rank quantization-aware training.

Thin wrapper over the C++ core. Arrays are float64 numpy matrices with
shape (C_out, C_in); per-group parameters have shape (C_out, groups).
"""

from ._dlqat import (
    ConfigError,
    DataError,
    NumericError,
    PackError,
    QuantSpec,
    ShapeError,
    audit,
    catalog,
    dequantize,
    evaluate,
    fake_quantize,
    gradcheck,
    init_quant_params,
    init_scale_bias,
    pack_bits,
    quantize_ints,
    setting_labels,
    ste_gradients,
    train,
    trainable_set,
    unpack_bits,
)

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "PackError",
    "QuantSpec",
    "ShapeError",
    "audit",
    "catalog",
    "dequantize",
    "evaluate",
    "fake_quantize",
    "gradcheck",
    "init_quant_params",
    "init_scale_bias",
    "pack_bits",
    "quantize_ints",
    "setting_labels",
    "ste_gradients",
    "train",
    "trainable_set",
    "unpack_bits",
]
