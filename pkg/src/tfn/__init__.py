"""Multimodal patient trajectory encoder with a time-aware masked LSTM,
note cross-attention and a disentangled fused embedding."""

__version__ = "0.1.0"
