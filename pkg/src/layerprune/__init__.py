"""Layer pruning by differentiable Gumbel-TopK mask search with offline top-K distillation."""

__version__ = "0.1.0"
