"""Sparse-to-dense decoder LM training kit.

Static unstructured weight-sparse pre-training, densification with
zero-initialized reactivation, dense fine-tuning with soft prompts, and an
analytic training-FLOPs accountant.
"""

__version__ = "0.1.0"
