"""Few-shot generalized category discovery over pre-extracted feature vectors.

Core submodules: :mod:`data` (feature sets, splits, augmentation, synthetic
benchmarks), :mod:`features_io` (file formats), :mod:`encoder` (adapter +
projection head with exact gradients), :mod:`losses` (training objectives),
:mod:`affinity` (per-epoch neighbor retrieval), :mod:`trainer` (two-stage
loop), :mod:`evaluate` (clustering metrics), :mod:`pipeline` (end-to-end
runs).  The :mod:`service` subpackage wraps the pipeline behind HTTP and the
:mod:`cli` module is a thin client over it.
"""

__version__ = "0.1.0"
