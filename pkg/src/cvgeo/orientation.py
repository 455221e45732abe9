"""Relative orientation from activation-map angular histograms.

Both views are reduced to a distribution of activation mass over azimuth.
Street column ``c`` of ``W`` sits at ``360 * (c + 0.5) / W`` degrees; aerial
pixels use their polar angle about the image centre, clockwise from image-down.
The lag that best aligns the two distributions is the estimated rotation.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import polar_angles
from .errors import DegenerateMapError, ShapeError, SupervisionError
from .explain import matching_score, grad_cam, threshold_pixels
from .numerics import dft, idft, rng


@dataclass
class AngularHistogram:
    mass: np.ndarray

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.mass.ndim != 1 or self.mass.size == 0:
            raise ShapeError("histogram mass must be a non-empty vector")
        if np.any(self.mass < 0):
            raise ValueError("histogram mass must be non-negative")

    @property
    def bins(self):
        return self.mass.size

    def shifted(self, k):
        return AngularHistogram(np.roll(self.mass, k))

    def smoothed(self, width=3):
        return AngularHistogram(box_filter(self.mass, width))


@dataclass
class OrientationEstimate:
    phi_deg: float
    correlation_peak: float
    signal: np.ndarray
    secondary_peak: tuple = None


@dataclass
class ErrorDistribution:
    errors: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    within_3_5: float
    near_180: float

    def as_dict(self):
        return {
            "n": int(self.errors.size),
            "within_3_5": self.within_3_5,
            "near_180": self.near_180,
            "mean_abs_error": float(np.mean(np.abs(self.errors))) if self.errors.size else 0.0,
            "edges": self.edges.tolist(),
            "percent": (100.0 * self.counts / max(1, self.errors.size)).tolist(),
        }


def _normalized(mass):
    total = mass.sum()
    if total <= 0:
        raise DegenerateMapError("no activation mass to histogram")
    return AngularHistogram(mass / total)


def _weights(pixels):
    w = np.asarray(pixels.weights, dtype=np.float64)
    if w.size == 0:
        raise DegenerateMapError("empty pixel set")
    return w


def street_histogram(pixels, W_s, B=360):
    w = _weights(pixels)
    cols = np.asarray(pixels.cols, dtype=np.int64)
    # bin of theta = 360 (c + 0.5) / W_s, in exact integer arithmetic
    bins = ((2 * cols + 1) * B // (2 * W_s)) % B
    return _normalized(np.bincount(bins, weights=w, minlength=B))


def angle_bins(theta_deg, B):
    # snap away float noise so that lattice angles land in their own bin
    x = np.round(np.asarray(theta_deg) * B / 360.0, 9)
    return np.floor(x).astype(np.int64) % B


def aerial_histogram(pixels, H_a, B=360):
    w = _weights(pixels)
    theta, radius = polar_angles(H_a)
    r, c = np.asarray(pixels.rows), np.asarray(pixels.cols)
    keep = radius[r, c] >= 0.5
    if not np.any(keep):
        raise DegenerateMapError("all selected pixels sit at the image centre")
    bins = angle_bins(theta[r[keep], c[keep]], B)
    return _normalized(np.bincount(bins, weights=w[keep], minlength=B))


def box_filter(mass, width=3):
    """Circular moving average over ``width`` bins (odd)."""
    if width % 2 != 1 or width < 1:
        raise ValueError("width must be a positive odd integer")
    h = width // 2
    return sum(np.roll(mass, k) for k in range(-h, h + 1)) / width


def _mass(p):
    return p.mass if isinstance(p, AngularHistogram) else np.asarray(p, dtype=np.float64)


def correlation_signal(p_street, p_aerial):
    """``c[k] = sum_t p_street[t] * p_aerial[t + k]`` over circular indices."""
    ps, pa = _mass(p_street), _mass(p_aerial)
    if ps.shape != pa.shape or ps.ndim != 1:
        raise ShapeError(f"histogram lengths differ: {ps.shape} vs {pa.shape}")
    # reversing the street index turns the product of spectra into a correlation
    rev = np.roll(ps[::-1], 1)
    return np.real(idft(dft(rev) * dft(pa)))


def naive_correlation(p_street, p_aerial):
    ps, pa = _mass(p_street), _mass(p_aerial)
    if ps.shape != pa.shape:
        raise ShapeError("histogram lengths differ")
    B = ps.size
    return np.array([sum(ps[t] * pa[(t + k) % B] for t in range(B)) for k in range(B)])


def circular_correlate(p_street, p_aerial, min_separation_deg=10.0):
    c = correlation_signal(p_street, p_aerial)
    B = c.size
    step = 360.0 / B
    k = int(np.argmax(c))
    lag = np.arange(B)
    sep = np.minimum((lag - k) % B, (k - lag) % B) * step
    far = sep >= min_separation_deg
    secondary = None
    if np.any(far):
        j = int(lag[far][np.argmax(c[far])])
        secondary = (j * step, float(c[j]))
    return OrientationEstimate(k * step, float(c[k]), c, secondary)


def estimate_orientation(params, pair, tau=0.5, B=360, smooth=False):
    _, traces = matching_score(params, pair.street, pair.aerial)
    street_map = grad_cam(params, traces, "street", pair.id, pair.id)
    aerial_map = grad_cam(params, traces, "aerial", pair.id, pair.id)
    ps = street_histogram(threshold_pixels(street_map, tau), street_map.values.shape[1], B)
    pa = aerial_histogram(threshold_pixels(aerial_map, tau), aerial_map.values.shape[0], B)
    if smooth:
        ps, pa = ps.smoothed(), pa.smoothed()
    return circular_correlate(ps, pa)


def wrap(x):
    """Map angles into (-180, 180]."""
    return 180.0 - np.mod(180.0 - np.asarray(x, dtype=np.float64), 360.0)


def fig6_edges(width=7.0):
    n = int(math.ceil((180.0 - width / 2) / width))
    return width * (np.arange(-n, n + 2) - 0.5)


def error_distribution(estimates, truth, width=7.0):
    est = np.array([e.phi_deg if isinstance(e, OrientationEstimate) else e for e in estimates],
                   dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if est.shape != truth.shape:
        raise ShapeError(f"{est.size} estimates for {truth.size} ground-truth angles")
    errors = wrap(est - truth)
    edges = fig6_edges(width)
    counts, _ = np.histogram(errors, edges)
    n = max(1, errors.size)
    within = float(np.sum(np.abs(errors) <= width / 2) / n) if errors.size else 0.0
    near = float(np.sum(180.0 - np.abs(errors) <= 5.0) / n) if errors.size else 0.0
    return ErrorDistribution(errors, edges, counts, within, near)


# supervised baseline: an MLP on both un-normalised embeddings predicting (cos, sin)

@dataclass
class RegressionConfig:
    hidden: int = 64
    epochs: int = 200
    lr: float = 1e-2
    batch: int = 64
    seed: int = 0


@dataclass
class RegressionHead:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    mu: np.ndarray = field(default=None)
    sd: np.ndarray = field(default=None)

    def _features(self, X):
        if self.mu is not None:
            X = (X - self.mu) / self.sd
        return X

    def forward(self, X):
        h = np.tanh(self._features(X) @ self.W1.T + self.b1)
        return h @ self.W2.T + self.b2, h

    def predict_deg(self, X):
        y, _ = self.forward(X)
        return np.degrees(np.arctan2(y[:, 1], y[:, 0])) % 360.0


def pair_features(params, pairs):
    rows = []
    for p in pairs:
        ts = M.forward(params, "street", p.street)
        ta = M.forward(params, "aerial", p.aerial)
        rows.append(np.concatenate([ts.pre_norm, ta.pre_norm]))
    return np.array(rows)


def fit_regression(X, phis, cfg=RegressionConfig()):
    X = np.asarray(X, dtype=np.float64)
    phis = np.asarray(phis, dtype=np.float64)
    g = rng(cfg.seed)
    D = X.shape[1]
    head = RegressionHead(
        W1=g.normal(0.0, 1.0 / math.sqrt(D), (cfg.hidden, D)),
        b1=np.zeros(cfg.hidden),
        W2=np.zeros((2, cfg.hidden)),
        b2=np.zeros(2),
        mu=X.mean(axis=0),
        sd=X.std(axis=0) + 1e-12,
    )
    Y = np.stack([np.cos(np.radians(phis)), np.sin(np.radians(phis))], axis=1)
    blocks = ("W1", "b1", "W2", "b2")
    m = {k: np.zeros_like(getattr(head, k)) for k in blocks}
    v = {k: np.zeros_like(getattr(head, k)) for k in blocks}
    t = 0
    Xf = head._features(X)
    for _ in range(cfg.epochs):
        order = g.permutation(len(X))
        for s in range(0, len(X), cfg.batch):
            idx = order[s:s + cfg.batch]
            h = np.tanh(Xf[idx] @ head.W1.T + head.b1)
            y = h @ head.W2.T + head.b2
            gy = 2.0 * (y - Y[idx]) / len(idx)
            gh = (gy @ head.W2) * (1.0 - h * h)
            grads = {"W2": gy.T @ h, "b2": gy.sum(0), "W1": gh.T @ Xf[idx], "b1": gh.sum(0)}
            t += 1
            for k in blocks:
                m[k] = 0.9 * m[k] + 0.1 * grads[k]
                v[k] = 0.999 * v[k] + 0.001 * grads[k] ** 2
                step = m[k] / (1 - 0.9 ** t) / (np.sqrt(v[k] / (1 - 0.999 ** t)) + 1e-8)
                getattr(head, k)[...] -= cfg.lr * step
    return head


def train_regression_baseline(params, train_pairs, eval_pairs, cfg=RegressionConfig()):
    """Fit the head on ``train_pairs`` and report its errors on ``eval_pairs``."""
    for p in list(train_pairs) + list(eval_pairs):
        if p.rotation_deg is None:
            raise SupervisionError(f"pair {p.id} has no ground-truth rotation")
    head = fit_regression(pair_features(params, train_pairs),
                          [p.rotation_deg for p in train_pairs], cfg)
    pred = head.predict_deg(pair_features(params, eval_pairs))
    return head, error_distribution(pred, [p.rotation_deg for p in eval_pairs])
