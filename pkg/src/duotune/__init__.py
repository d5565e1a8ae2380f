"""duotune: a desk-scale lab for low-learning-rate tuning of dual-encoder
retrieval systems, with layer freezing, optimizer/scheduler variants, and
positive-negative discrepancy evaluation with significance testing."""

__version__ = "0.1.0"
