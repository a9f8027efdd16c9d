"""Implicit semantic augmentation for metric learning across visual domains.

A small, fully deterministic numpy implementation of a co-teacher training
objective whose metric-learning term runs on implicitly augmented logits,
together with the oracles that certify its math: finite-difference gradient
checks, a Monte-Carlo check of the expected-loss upper bound, and an
empirical audit of the feature/logit distance sandwich.
"""

__version__ = "0.1.0"
