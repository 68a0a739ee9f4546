"""Classification heads: map support and query embeddings to two logits.

Class order is fixed everywhere: index 0 is the positive class, index 1 the
negative (two-way) or null (one-way) class.

The one-way heads need no negative supports. The prototypical variant
scores the query against the positive centroid and against a null centroid
fixed at the origin, so the decision reduces to ||q - c||^2 < ||q||^2. The
normal variant models each class as a diagonal Gaussian fitted to the
support embeddings and the null class as a zero-mean Gaussian whose
per-dimension standard deviation is either fixed at 1 or trained through a
softplus reparameterization.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

SIGMA_FLOOR = 1e-3
K_MIN = 2
LOG_2PI = float(np.log(2.0 * np.pi))

# softplus(rho) == 1
_RHO_FOR_UNIT_SIGMA = float(np.log(np.expm1(1.0)))


class HeadError(ValueError):
    pass


class HeadKind(Enum):
    TWO_WAY_MATCHING = "two_way_matching"
    TWO_WAY_PROTO = "two_way_proto"
    TWO_WAY_NORMAL = "two_way_normal"
    ONE_WAY_PROTO = "one_way_proto"
    ONE_WAY_NORMAL = "one_way_normal"

    @property
    def one_way(self) -> bool:
        return self in (HeadKind.ONE_WAY_PROTO, HeadKind.ONE_WAY_NORMAL)

    @property
    def normal(self) -> bool:
        return self in (HeadKind.TWO_WAY_NORMAL, HeadKind.ONE_WAY_NORMAL)

    @property
    def episode_mode(self) -> str:
        return "one_way" if self.one_way else "two_way"


@dataclass
class Gaussian:
    """Diagonal Gaussian class model."""
    mu: Tensor
    sigma: Tensor


class NullClass:
    """The rejection class: mean fixed at exactly zero, never updated.

    With ``trainable=False`` the standard deviation is exactly 1 in every
    dimension. With ``trainable=True`` it is softplus(rho) with a
    per-dimension rho initialized so sigma starts at 1.
    """

    def __init__(self, dim: int, trainable: bool = False):
        self.dim = dim
        self.trainable = trainable
        self._mu = Tensor(np.zeros(dim))
        if trainable:
            self.rho = Parameter("head.null_rho",
                                 np.full(dim, _RHO_FOR_UNIT_SIGMA))
        else:
            self.rho = None
            self._sigma = Tensor(np.ones(dim))

    def gaussian(self) -> Gaussian:
        if self.trainable:
            return Gaussian(mu=self._mu, sigma=T.softplus(self.rho.tensor))
        return Gaussian(mu=self._mu, sigma=self._sigma)

    def parameters(self) -> list:
        return [self.rho] if self.trainable else []


def centroid(supports: Tensor) -> Tensor:
    """Mean of the support rows: the class prototype."""
    if supports.data.ndim != 2 or supports.shape[0] < 1:
        raise HeadError(f"centroid: need a non-empty [K,D] matrix, "
                        f"got shape {supports.shape}")
    return T.tmean(supports, axis=0)


def sq_euclidean(q: Tensor, c: Tensor) -> Tensor:
    if q.shape != c.shape:
        raise T.ShapeError("sq_euclidean", q.shape, c.shape)
    return T.tsum(T.square(T.sub(q, c)))


def _as_row(x: Tensor) -> Tensor:
    return T.reshape(x, (1,))


def _sq_dists_to_rows(q: Tensor, rows: Tensor) -> Tensor:
    """[K] squared distances from q to each row of a [K,D] matrix."""
    diff = T.sub(T.broadcast_rows(q, rows.shape[0]), rows)
    return T.tsum(T.square(diff), axis=1)


def _cosine_to_rows(q: Tensor, rows: Tensor) -> Tensor:
    qn = T.sqrt(T.tsum(T.square(q)))
    prods = T.tsum(T.mul(T.broadcast_rows(q, rows.shape[0]), rows), axis=1)
    norms = T.sqrt(T.tsum(T.square(rows), axis=1))
    return T.div(prods, T.mul(norms, qn))


def two_way_matching_logits(pos: Tensor, neg: Tensor, q: Tensor,
                            metric: str = "sqeuclid") -> Tensor:
    """Attention over all supports; class logit is log of the summed
    attention mass, log(sum_i in class softmax_i)."""
    for name, s in (("positive", pos), ("negative", neg)):
        if s.data.ndim != 2 or s.shape[0] < 1:
            raise HeadError(f"matching head: empty {name} support set")
    if metric == "sqeuclid":
        score_pos = T.negate(_sq_dists_to_rows(q, pos))
        score_neg = T.negate(_sq_dists_to_rows(q, neg))
    elif metric == "cosine":
        score_pos = _cosine_to_rows(q, pos)
        score_neg = _cosine_to_rows(q, neg)
    else:
        raise HeadError(f"matching head: unknown metric {metric!r}")
    lse_all = T.logsumexp(T.concat([score_pos, score_neg]))
    return T.concat([
        _as_row(T.sub(T.logsumexp(score_pos), lse_all)),
        _as_row(T.sub(T.logsumexp(score_neg), lse_all)),
    ])


def two_way_proto_logits(pos: Tensor, neg: Tensor, q: Tensor) -> Tensor:
    logit_pos = T.negate(sq_euclidean(q, centroid(pos)))
    logit_neg = T.negate(sq_euclidean(q, centroid(neg)))
    return T.concat([_as_row(logit_pos), _as_row(logit_neg)])


def one_way_proto_logits(pos: Tensor, q: Tensor) -> Tensor:
    """[-||q - c||^2, -||q||^2]: distance to the positive centroid against
    distance to the null centroid at the origin."""
    logit_pos = T.negate(sq_euclidean(q, centroid(pos)))
    logit_null = T.negate(T.tsum(T.square(q)))
    return T.concat([_as_row(logit_pos), _as_row(logit_null)])


def gaussian_fit(supports: Tensor, sigma_floor: float = SIGMA_FLOOR,
                 k_min: int = K_MIN) -> Gaussian:
    """Fit a diagonal Gaussian to the support rows.

    mu is the column mean, sigma the population standard deviation per
    column, clamped from below at sigma_floor. Differentiable through both.
    """
    if supports.data.ndim != 2:
        raise HeadError(f"gaussian_fit: need [K,D], got shape {supports.shape}")
    k = supports.shape[0]
    if k < k_min:
        raise HeadError(
            f"insufficient supports for Gaussian head: got {k}, need >= {k_min}"
        )
    mu = T.tmean(supports, axis=0)
    centered = T.sub(supports, T.broadcast_rows(mu, k))
    var = T.tmean(T.square(centered), axis=0)
    sigma = T.maximum(T.sqrt(var), sigma_floor)
    return Gaussian(mu=mu, sigma=sigma)


def gaussian_loglik(q: Tensor, g: Gaussian) -> Tensor:
    """Diagonal-Gaussian log density of q, dimensions treated independently:
    sum_d [ -0.5 ((q_d - mu_d)/sigma_d)^2 - log sigma_d ] - D/2 log(2 pi).
    """
    if np.any(g.sigma.data <= 0):
        raise HeadError("gaussian_loglik: sigma must be positive")
    if q.shape != g.mu.shape:
        raise T.ShapeError("gaussian_loglik", q.shape, g.mu.shape)
    z = T.div(T.sub(q, g.mu), g.sigma)
    quad = T.mul(T.tsum(T.square(z)), -0.5)
    logdet = T.tsum(T.log(g.sigma))
    const = 0.5 * q.shape[0] * LOG_2PI
    return T.sub(T.sub(quad, logdet), const)


def one_way_normal_logits(pos: Tensor, q: Tensor, null: NullClass,
                          sigma_floor: float = SIGMA_FLOOR,
                          k_min: int = K_MIN) -> Tensor:
    fitted = gaussian_fit(pos, sigma_floor, k_min)
    ll_pos = gaussian_loglik(q, fitted)
    ll_null = gaussian_loglik(q, null.gaussian())
    return T.concat([_as_row(ll_pos), _as_row(ll_null)])


def two_way_normal_logits(pos: Tensor, neg: Tensor, q: Tensor,
                          sigma_floor: float = SIGMA_FLOOR,
                          k_min: int = K_MIN) -> Tensor:
    ll_pos = gaussian_loglik(q, gaussian_fit(pos, sigma_floor, k_min))
    ll_neg = gaussian_loglik(q, gaussian_fit(neg, sigma_floor, k_min))
    return T.concat([_as_row(ll_pos), _as_row(ll_neg)])


def episode_logits(kind: HeadKind, pos: Tensor, neg, q: Tensor, *,
                   null: NullClass = None,
                   sigma_floor: float = SIGMA_FLOOR,
                   k_min: int = K_MIN,
                   matching_metric: str = "sqeuclid",
                   temperature: float = 1.0) -> Tensor:
    """Dispatch to the head for ``kind``. ``temperature`` rescales the
    normal heads' log-likelihood logits (1.0 leaves them raw)."""
    if kind is HeadKind.TWO_WAY_MATCHING:
        return two_way_matching_logits(pos, neg, q, metric=matching_metric)
    if kind is HeadKind.TWO_WAY_PROTO:
        return two_way_proto_logits(pos, neg, q)
    if kind is HeadKind.ONE_WAY_PROTO:
        return one_way_proto_logits(pos, q)
    if kind is HeadKind.TWO_WAY_NORMAL:
        logits = two_way_normal_logits(pos, neg, q, sigma_floor, k_min)
    elif kind is HeadKind.ONE_WAY_NORMAL:
        if null is None:
            raise HeadError("one_way_normal needs a NullClass")
        logits = one_way_normal_logits(pos, q, null, sigma_floor, k_min)
    else:
        raise HeadError(f"unknown head kind {kind!r}")
    if temperature != 1.0:
        logits = T.mul(logits, 1.0 / temperature)
    return logits


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-softmax of the true class over the two logits."""
    if logits.shape != (2,):
        raise T.ShapeError("cross_entropy", logits.shape, (2,))
    if label not in (0, 1):
        raise HeadError(f"cross_entropy: label must be 0 or 1, got {label}")
    onehot = np.zeros(2)
    onehot[label] = 1.0
    return T.negate(T.tsum(T.mul(T.log_softmax(logits), Tensor(onehot))))
