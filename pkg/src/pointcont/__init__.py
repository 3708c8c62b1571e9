"""Point cloud classification with content-based (feature-space-clustered) attention.

The package is organized bottom-up:

- ``geometry``: farthest point sampling, kNN patch construction
- ``nn_core``: parameter store, hand-written layers with explicit backward
  passes, finite-difference gradient checking, PCNT checkpoint container
- ``edgeconv``: local edge feature extraction over patches
- ``cluster``: balanced hierarchical binary clustering in feature space
- ``attention``: clustered scalar/vector self-attention blocks
- ``aggregator``: per-stage feature aggregation (two-branch frequency split)
- ``model``: full classifier, training loop, evaluation
- ``data``: toy shape generator, OFF/PLY handling, augmentation
- ``bench``: multiply-accumulate counting and timing for attention variants
- ``cli``: command line front end
"""

from .model import ModelConfig, build_model  # noqa: F401

__version__ = "0.1.0"
