"""Multi-source domain adaptation for time-series classification with domain-conditioned prompts."""

__version__ = "0.1.0"
