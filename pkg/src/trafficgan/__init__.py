"""LSTM-based GAN for estimating freeway traffic states from partial observations."""

__version__ = "0.1.0"
