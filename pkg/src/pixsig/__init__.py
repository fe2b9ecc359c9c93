"""Desk-scale toolkit for building clean and backdoored image classifiers,
fingerprinting them through per-pixel probe signatures, and training a
meta-detector that tells the two populations apart.

Subsystems:

- :mod:`pixsig.nnkernel` - minimal numpy neural-network kernel (conv,
  dense, pooling, residual blocks, Adam).
- :mod:`pixsig.data` - IDX ingestion, synthetic datasets, trigger
  injection and stamping.
- :mod:`pixsig.zoo` - mass production of clean/Trojaned model zoos with
  attack-success gating.
- :mod:`pixsig.signature` - black-box per-pixel probe signatures.
- :mod:`pixsig.detector` - meta-detector training/evaluation over
  signatures, sample-complexity sweeps.
- :mod:`pixsig.stats` - population diagnostics: variance, frequency
  spectra, directional comparisons.
- :mod:`pixsig.tensorio` / :mod:`pixsig.cli` - persistence formats and
  the command-line pipeline.
"""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, GateFailure, NumericError, PixsigError

__all__ = [
    "ConfigError",
    "FormatError",
    "GateFailure",
    "NumericError",
    "PixsigError",
    "__version__",
]
