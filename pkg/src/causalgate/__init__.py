"""Causal-disentangled severity regression on synthetic confounded cohorts.

Pipeline: a seeded cohort generator with a known causal oracle, a narrative
token schema, a small trainable encoder, a two-channel token gate with
environment mixing and a contrastive mix loss, three regression heads, a
gradient-boosted tree baseline, and table-shaped metric/saliency reports.
"""

from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
