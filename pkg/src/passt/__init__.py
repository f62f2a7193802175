"""Patchout spectrogram transformer: tokenizer, numpy transformer, training recipe and benchmarks."""

__version__ = "0.1.0"
