"""Unsupervised-to-online RL at desk scale: Hilbert-feature skill pretraining,
skill identification with reward scale matching, and online fine-tuning."""

__version__ = "0.1.0"
