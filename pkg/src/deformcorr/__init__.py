"""Template SDF fields with dense correspondence, learned from articulated shape collections.

Modules, bottom up: ``linalg3`` (3x3 SVD, closest rotation, Procrustes residual),
``autodiff`` (differentiable primitives with hand-written SVD backward rules), ``nets``
(hypernetwork-conditioned sine networks), ``losses``, ``geometry``, ``datagen``,
``training``, ``evalapps`` and ``cli``.
"""
from . import autodiff, linalg3  # noqa: F401  (autodiff sets the float64 default)

__version__ = "0.1.0"
