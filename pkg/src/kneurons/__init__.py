"""Multimodal knowledge-neuron identification on a small captioning transformer."""

__version__ = "0.1.0"
