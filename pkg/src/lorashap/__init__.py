"""SVD-form LoRA on a tiny transformer with Shapley-sensitivity rank scoring."""

__version__ = "0.1.0"
