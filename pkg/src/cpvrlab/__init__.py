"""Conditional pointer-value retrieval lab.

Task generation with an exact oracle, adaptive/modular transformer
variants built on a small tape-based autodiff core, and a training and
evaluation harness for hop-generalization experiments.
"""

__version__ = "0.1.0"
