"""Unsupervised sparse speech representations with a Gumbel-Softmax memory."""

__version__ = "0.1.0"
