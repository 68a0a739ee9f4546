"""One-way few-shot classification with prototypical networks.

A small numpy-based library for episodic few-shot training where only the
positive class has support examples. Queries are accepted or rejected
against a "null class" fixed at the origin of the embedding space (or at a
unit Gaussian for the distribution-based heads); batch normalization at the
end of each embedding block keeps the latent space centered there.
"""

from .tensor import Parameter, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "ShapeError", "__version__"]
