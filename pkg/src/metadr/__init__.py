"""Continual domain adaptation laboratory.

A self-contained training lab for studying catastrophic forgetting under
sequential domain shift: a second-order autodiff core, desk-scale models,
an image-randomization engine, continual trainers (including a
meta-learned regularizer over randomized auxiliary domains), and
deterministic evaluation/reporting.
"""

__version__ = "0.1.0"
