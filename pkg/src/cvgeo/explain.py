"""Grad-CAM maps for the cross-view matching score.

The score is the inner product of the two un-normalised embeddings, so its
gradient with respect to one view's pooled features is ``W2^T p_other``. With
average pooling the channel weights are that vector divided by ``H * W``.
"""

from dataclasses import dataclass

import numpy as np

from . import model as M
from .data import disk_mask, write_feature_map
from .errors import DegenerateMapError, ShapeError, TraceError


@dataclass
class ActivationMap:
    view: str
    values: np.ndarray
    street_id: str = ""
    aerial_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"activation map must be 2-D, got {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("activation map has negative entries")


@dataclass
class PixelSet:
    """Selected pixels and their normalised activation weights."""
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    shape: tuple

    def __len__(self):
        return len(self.weights)


def matching_score(params, street, aerial):
    ts = M.forward(params, "street", street)
    ta = M.forward(params, "aerial", aerial)
    if ts.pre_norm.ndim != 1 or ta.pre_norm.ndim != 1:
        raise ShapeError("matching_score takes a single pair, not a batch")
    return float(ts.pre_norm @ ta.pre_norm), (ts, ta)


def grad_cam_core(activations, grad_pooled):
    """Weighted channel sum under average pooling.

    ``activations`` is ``(H, W, C1)``; ``grad_pooled`` is d(score)/d(pooled).
    Returns ``(map, alpha)``.
    """
    A = np.asarray(activations, dtype=np.float64)
    H, W = A.shape[:2]
    alpha = np.asarray(grad_pooled, dtype=np.float64) / (H * W)
    return np.maximum(A @ alpha, 0.0), alpha


def _check_fresh(trace, params):
    M._check_trace(trace, params)
    W1, b1 = params.stem(trace.view)
    pre = trace.input @ W1.T + b1
    pre_norm = trace.pooled @ params.W2.T + params.b2
    if not (np.allclose(pre, trace.stage1_pre, rtol=1e-12, atol=1e-12)
            and np.allclose(pre_norm, trace.pre_norm, rtol=1e-12, atol=1e-12)):
        raise TraceError(f"{trace.view} trace was not produced by these parameters")


def channel_weights(params, traces, target_view):
    ts, ta = traces
    if ts.view != "street" or ta.view != "aerial":
        raise TraceError("traces must be (street, aerial)")
    target, other = (ts, ta) if target_view == "street" else (ta, ts)
    if target_view not in M.VIEWS:
        raise ValueError(f"unknown view {target_view!r}")
    for tr in traces:
        _check_fresh(tr, params)
    grad_pooled = params.W2.T @ other.pre_norm
    H, W = target.stage1_post.shape[:2]
    return target, grad_pooled / (H * W)


def grad_cam(params, traces, target_view, street_id="", aerial_id=""):
    """Activation map of ``target_view`` for the score of the traced pair.

    Aerial maps are zeroed outside the circular field of view, where the
    stem only sees its own bias.
    """
    target, alpha = channel_weights(params, traces, target_view)
    values = np.maximum(target.stage1_post @ alpha, 0.0)
    if target_view == "aerial":
        values = values * disk_mask(values.shape[0])
    return ActivationMap(target_view, values, street_id, aerial_id)


def pair_maps(params, pair):
    _, traces = matching_score(params, pair.street, pair.aerial)
    return (grad_cam(params, traces, "street", pair.id, pair.id),
            grad_cam(params, traces, "aerial", pair.id, pair.id))


def normalize_map(values):
    v = np.asarray(values, dtype=np.float64)
    lo = min(0.0, float(v.min()))
    hi = float(v.max())
    if hi <= 0.0 or hi == lo:
        raise DegenerateMapError("activation map has no positive mass")
    return (v - lo) / (hi - lo)


def threshold_pixels(amap, tau=0.5):
    """Pixels whose normalised value exceeds ``tau``, weighted by that value."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    values = amap.values if isinstance(amap, ActivationMap) else np.asarray(amap, float)
    norm = normalize_map(values)
    rows, cols = np.nonzero(norm > tau)
    return PixelSet(rows, cols, norm[rows, cols], values.shape)


def rotation_equivariance(params, pairs, phis=tuple(range(30, 331, 30))):
    """Mean normalised correlation between the map of a rotated aerial and
    the rotated map of the original aerial, inside the field of view."""
    from .data import rotate_aerial

    scores = []
    for pair in pairs:
        _, traces = matching_score(params, pair.street, pair.aerial)
        base = grad_cam(params, traces, "aerial").values
        mask = disk_mask(base.shape[0])
        for phi in phis:
            _, tr = matching_score(params, pair.street, rotate_aerial(pair.aerial, phi))
            got = grad_cam(params, tr, "aerial").values[mask]
            want = rotate_aerial(base[..., None], phi)[..., 0][mask]
            a, b = got - got.mean(), want - want.mean()
            den = np.linalg.norm(a) * np.linalg.norm(b)
            scores.append(float(a @ b / den) if den > 0 else 0.0)
    return float(np.mean(scores))


def write_pgm(path, amap):
    """8-bit binary PGM, scaled so the map maximum is 255."""
    v = amap.values if isinstance(amap, ActivationMap) else np.asarray(amap, float)
    top = v.max()
    img = np.zeros(v.shape, np.uint8) if top <= 0 else np.round(255.0 * v / top).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (v.shape[1], v.shape[0]))
        f.write(img.tobytes())


def write_map_cvfm(path, amap):
    write_feature_map(path, amap.values[..., None])
