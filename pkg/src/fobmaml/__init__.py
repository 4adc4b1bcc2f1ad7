"""First-order bi-level MAML: meta-gradients from perturbed inner problems."""

__version__ = "0.1.0"
