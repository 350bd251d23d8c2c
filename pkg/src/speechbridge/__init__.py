"""Frame-level contrastive speech/phoneme embedding toolkit."""

__version__ = "0.1.0"
