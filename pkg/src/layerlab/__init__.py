"""Layer-wise word-translation probing for small encoder-decoder Transformers."""

__version__ = "0.1.0"
