"""Structured latent-factor reconstruction on a toy shape-from-shading pipeline.

Submodules: ``autodiff`` (tape + MLP + Adam), ``dag`` (orderings, acyclicity),
``permbo`` (GP-BO over permutations), ``pipeline`` (encoders, decoders,
renderer, losses), ``learners`` (structure search and retraining), ``synth``
(synthetic SCM corpus), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
