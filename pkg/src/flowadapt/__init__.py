"""Flow-matching generation with post-hoc fine-grained conditioning adapters."""

__version__ = "0.1.0"
