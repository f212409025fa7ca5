"""Speaker-aware masked-prediction pre-training lab for mixture speech."""

__version__ = "0.1.0"
