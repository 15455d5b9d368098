"""evexit: uncertainty-aware decision fusion for multi-exit classifiers.

Library layout:

- ``diffcore``   reverse-mode differentiation over float64 tensors
- ``evidential`` logits -> evidence/belief/uncertainty, evidential loss
- ``fusion``     collaborative decision fusion, baselines, traces
- ``model``      toy multi-exit network, cost accounting, checkpoints
- ``training``   evidential / cross-entropy training with guidance
- ``inference``  anytime and budgeted evaluation, threshold calibration
- ``diversity``  Q-statistic, correlation, KW variance, agreement
- ``data``       datasets, splits, synthetic generators, logits store
- ``cli``        the ``evexit`` command-line frontend
"""

from .cli import __version__

__all__ = ["__version__"]
