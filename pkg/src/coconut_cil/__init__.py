"""Class-incremental spoken language understanding on a numpy toy stack.

Modules: ``autodiff`` (reverse-mode tensors), ``model`` (encoders, projections,
decoder), ``losses`` (contrastive objectives), ``decoding``, ``data``
(synthetic corpus), ``harness`` (continual-learning protocol), ``metrics``.
"""

__version__ = "0.1.0"
