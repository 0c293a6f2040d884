"""Multiplexed ghost imaging with four-mode entangled light.

Gaussian-state simulation of the correlated ghost images, Wick-contraction
moment engine, and measurement-reduction reconstruction.
"""

__version__ = "0.1.0"


class ConsistencyError(RuntimeError):
    """An internal numerical invariant was violated."""
