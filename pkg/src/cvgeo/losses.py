"""Metric-learning losses on distances and cosine similarities.

Every loss returns ``(value, grads)`` with gradients taken with respect to
its array inputs. Four kinds are available: the hard-margin triplet loss,
the weighted soft-margin triplet loss, the symmetric binomial deviance and
the asymmetric binomial deviance that weighs positives and negatives
separately.
"""

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, EmptyBatchError, NormalizationError, ShapeError

LOSS_KINDS = ("hard_triplet", "weighted_soft", "binomial_sym", "binomial_asym")


@dataclass
class LossConfig:
    kind: str = "binomial_asym"
    margin: float = 0.0
    alpha: float = 20.0
    alpha_p: float = 5.0
    alpha_n: float = 20.0
    m_p: float = 0.0
    m_n: float = 0.7
    distance: str = "squared_euclidean"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.distance not in ("squared_euclidean", "euclidean"):
            raise ConfigError(f"unknown distance {self.distance!r}")
        for name in ("alpha", "alpha_p", "alpha_n"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown loss config key: {unknown[0]}")
        return cls(**d)


def soft_margin(d):
    """``log(1 + exp(d))`` without overflow."""
    return np.logaddexp(0.0, d)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def normalized_soft_margin(alpha, d):
    return soft_margin(alpha * np.asarray(d, dtype=np.float64)) / alpha


def normalized_soft_margin_grad(alpha, d):
    return sigmoid(alpha * np.asarray(d, dtype=np.float64))


def _triplet_arrays(d_p, d_n):
    d_p = np.atleast_1d(np.asarray(d_p, dtype=np.float64))
    d_n = np.atleast_1d(np.asarray(d_n, dtype=np.float64))
    if d_p.shape != d_n.shape or d_p.ndim != 1:
        raise ShapeError(f"triplet arrays differ in shape: {d_p.shape} vs {d_n.shape}")
    if d_p.size == 0:
        raise EmptyBatchError("no triplets")
    return d_p, d_n


def hard_triplet_loss(d_p, d_n, m):
    """Mean hinge ``max(0, d_p - d_n + m)``; the kink gets subgradient 0."""
    d_p, d_n = _triplet_arrays(d_p, d_n)
    z = d_p - d_n + m
    n = d_p.size
    active = (z > 0.0).astype(np.float64)
    return float(np.maximum(z, 0.0).mean()), (active / n, -active / n)


def weighted_soft_margin_loss(d_p, d_n, alpha):
    """Mean ``log(1 + exp(alpha * (d_p - d_n)))``."""
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    d_p, d_n = _triplet_arrays(d_p, d_n)
    z = alpha * (d_p - d_n)
    n = d_p.size
    g = alpha * sigmoid(z) / n
    return float(soft_margin(z).mean()), (g, -g)


@dataclass
class BatchSimilarities:
    s_p: np.ndarray
    s_n: np.ndarray
    pos_index: np.ndarray = None  # (N_p, 2) anchor/candidate rows
    neg_index: np.ndarray = None  # (N_n, 2)


def _sim_sets(batch):
    s_p = np.atleast_1d(np.asarray(batch.s_p, dtype=np.float64))
    s_n = np.atleast_1d(np.asarray(batch.s_n, dtype=np.float64))
    if s_p.size == 0 or s_n.size == 0:
        raise EmptyBatchError("binomial loss needs at least one positive and one negative")
    return s_p, s_n


def binomial_loss(batch, cfg):
    """Asymmetric binomial deviance.

    ``sum(sp(-a_p (s_p - m_p))) / (a_p N_p) + sum(sp(a_n (s_n - m_n))) / (a_n N_n)``
    where ``sp`` is the soft margin. With ``cfg.kind == "binomial_sym"`` the
    unnormalised symmetric form with a single ``alpha`` and ``margin`` is used.
    Returns ``(value, (grad_s_p, grad_s_n))``.
    """
    s_p, s_n = _sim_sets(batch)
    if cfg.kind == "binomial_sym":
        return binomial_deviance(s_p, s_n, cfg.alpha, cfg.margin)
    a_p, a_n, m_p, m_n = cfg.alpha_p, cfg.alpha_n, cfg.m_p, cfg.m_n
    n_p, n_n = s_p.size, s_n.size
    value = (soft_margin(-a_p * (s_p - m_p)).sum() / (a_p * n_p)
             + soft_margin(a_n * (s_n - m_n)).sum() / (a_n * n_n))
    g_p = -sigmoid(-a_p * (s_p - m_p)) / n_p
    g_n = sigmoid(a_n * (s_n - m_n)) / n_n
    return float(value), (g_p, g_n)


def binomial_deviance(s_p, s_n, alpha, m):
    """Symmetric binomial deviance with shared ``alpha`` and margin ``m``."""
    s_p, s_n = _sim_sets(BatchSimilarities(s_p, s_n))
    value = soft_margin(-alpha * (s_p - m)).mean() + soft_margin(alpha * (s_n - m)).mean()
    g_p = -alpha * sigmoid(-alpha * (s_p - m)) / s_p.size
    g_n = alpha * sigmoid(alpha * (s_n - m)) / s_n.size
    return float(value), (g_p, g_n)


@dataclass
class PairTerms:
    """Similarities and distances for a list of (anchor, candidate) rows."""

    index: np.ndarray  # (N, 2)
    s: np.ndarray
    sq_dist: np.ndarray
    dist: np.ndarray


def _check_unit(x, name):
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise NormalizationError(f"{name} are not unit-norm (max deviation "
                                 f"{np.max(np.abs(norms - 1.0)):.2e})")


def pair_similarities(anchors, candidates, pairing):
    """Cosine similarity and (squared) Euclidean distance for each pairing row."""
    anchors = np.asarray(anchors, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if anchors.shape[-1] != candidates.shape[-1]:
        raise ShapeError("anchor and candidate dimensions differ")
    _check_unit(anchors, "anchors")
    _check_unit(candidates, "candidates")
    idx = np.asarray(pairing, dtype=np.int64).reshape(-1, 2)
    a = anchors[idx[:, 0]]
    b = candidates[idx[:, 1]]
    s = np.sum(a * b, axis=1)
    sq = np.sum((a - b) ** 2, axis=1)
    return PairTerms(idx, s, sq, np.sqrt(sq))


def pair_backward(anchors, candidates, terms, grad_s=None, grad_sq=None, grad_dist=None):
    """Scatter gradients on similarities/distances back onto the embeddings."""
    anchors = np.asarray(anchors, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    ga = np.zeros_like(anchors)
    gb = np.zeros_like(candidates)
    i, j = terms.index[:, 0], terms.index[:, 1]
    a, b = anchors[i], candidates[j]
    coef_a = np.zeros_like(a)
    coef_b = np.zeros_like(b)
    if grad_s is not None:
        coef_a += grad_s[:, None] * b
        coef_b += grad_s[:, None] * a
    if grad_sq is not None:
        coef_a += 2.0 * grad_sq[:, None] * (a - b)
        coef_b -= 2.0 * grad_sq[:, None] * (a - b)
    if grad_dist is not None:
        safe = np.where(terms.dist > 0.0, terms.dist, 1.0)
        u = np.where(terms.dist[:, None] > 0.0, (a - b) / safe[:, None], 0.0)
        coef_a += grad_dist[:, None] * u
        coef_b -= grad_dist[:, None] * u
    np.add.at(ga, i, coef_a)
    np.add.at(gb, j, coef_b)
    return ga, gb
