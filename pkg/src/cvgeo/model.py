"""Two-stream embedding network with hand-written forward and backward passes.

Each stream applies its own per-location affine map (a 1x1 convolution,
``C -> C1``) followed by ReLU; the streams then share a spatial average pool,
an affine head ``C1 -> K`` and L2 normalisation.

``forward`` and ``backward`` accept inputs with any number of leading batch
dimensions: ``(..., H, W, C)``. Parameter gradients are summed over them.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmbeddingDegenerate, FormatError, ShapeError, TraceError
from .numerics import rng

VIEWS = ("street", "aerial")
BLOCK_ORDER = ("W1_street", "b1_street", "W1_aerial", "b1_aerial", "W2", "b2")

CKPT_MAGIC = b"CVCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sB3I")


@dataclass
class ModelParams:
    W1_street: np.ndarray  # (C1, C)
    b1_street: np.ndarray  # (C1,)
    W1_aerial: np.ndarray  # (C1, C)
    b1_aerial: np.ndarray  # (C1,)
    W2: np.ndarray         # (K, C1)
    b2: np.ndarray         # (K,)

    @property
    def dims(self):
        C1, C = self.W1_street.shape
        return C, C1, self.W2.shape[0]

    def blocks(self):
        return {name: getattr(self, name) for name in BLOCK_ORDER}

    def stem(self, view):
        if view not in VIEWS:
            raise ValueError(f"unknown view {view!r}")
        return getattr(self, f"W1_{view}"), getattr(self, f"b1_{view}")

    def copy(self):
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()})

    def zeros_like(self):
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.blocks().items()})

    def __iadd__(self, other):
        for k in BLOCK_ORDER:
            getattr(self, k)[...] += getattr(other, k)
        return self


ParamGrads = ModelParams


@dataclass
class ForwardTrace:
    view: str
    input: np.ndarray        # (..., H, W, C)
    stage1_pre: np.ndarray   # (..., H, W, C1)
    stage1_post: np.ndarray  # (..., H, W, C1)
    pooled: np.ndarray       # (..., C1)
    pre_norm: np.ndarray     # (..., K)
    norm: np.ndarray         # (...)
    embedding: np.ndarray    # (..., K)


def init_params(C, C1, K, seed):
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    if min(C, C1, K) <= 0:
        raise ShapeError("model dimensions must be positive")
    g = rng(seed)
    return ModelParams(
        W1_street=g.normal(0.0, np.sqrt(2.0 / C), (C1, C)),
        b1_street=np.zeros(C1),
        W1_aerial=g.normal(0.0, np.sqrt(2.0 / C), (C1, C)),
        b1_aerial=np.zeros(C1),
        W2=g.normal(0.0, np.sqrt(2.0 / C1), (K, C1)),
        b2=np.zeros(K),
    )


def stage1(params, view, t):
    W1, b1 = params.stem(view)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim < 3 or t.shape[-1] != W1.shape[1]:
        raise ShapeError(f"{view} input has shape {t.shape}; expected (..., H, W, {W1.shape[1]})")
    pre = (t.reshape(-1, t.shape[-1]) @ W1.T + b1).reshape(t.shape[:-1] + (W1.shape[0],))
    return pre, np.maximum(pre, 0.0)


def head(params, pooled):
    """Shared affine head and normalisation: returns (pre_norm, norm, embedding)."""
    pre_norm = pooled @ params.W2.T + params.b2
    norm = np.linalg.norm(pre_norm, axis=-1)
    if np.any(norm == 0.0):
        raise EmbeddingDegenerate("pre-normalization embedding is exactly zero")
    return pre_norm, norm, pre_norm / norm[..., None]


def forward(params, view, t):
    pre, post = stage1(params, view, t)
    pooled = post.mean(axis=(-3, -2))
    pre_norm, norm, emb = head(params, pooled)
    return ForwardTrace(view, np.asarray(t, dtype=np.float64), pre, post, pooled, pre_norm, norm, emb)


def embed(params, view, t):
    return forward(params, view, t).embedding


def normalization_backward(embedding, norm, grad_embedding):
    """Pull a gradient back through ``e = p / ||p||``: ``(I - e e^T) g / ||p||``."""
    e = embedding
    g = grad_embedding
    return (g - e * np.sum(e * g, axis=-1, keepdims=True)) / norm[..., None]


def _check_trace(trace, params):
    C, C1, K = params.dims
    if (trace.input.shape[-1] != C or trace.stage1_pre.shape[-1] != C1
            or trace.pre_norm.shape[-1] != K
            or trace.stage1_pre.shape[:-1] != trace.input.shape[:-1]):
        raise TraceError("trace does not match the parameter shapes")


def backward_from_pooled(trace, grad_pooled, params):
    """Gradients from d(loss)/d(pooled) down to the stem and the input."""
    _check_trace(trace, params)
    W1, _ = params.stem(trace.view)
    H, W = trace.stage1_pre.shape[-3:-1]
    g_pre = (trace.stage1_pre > 0.0) * (grad_pooled[..., None, None, :] / (H * W))
    C = trace.input.shape[-1]
    C1 = g_pre.shape[-1]
    flat_g = g_pre.reshape(-1, C1)
    gW1 = flat_g.T @ trace.input.reshape(-1, C)
    gb1 = flat_g.sum(axis=0)
    grad_input = (flat_g @ W1).reshape(trace.input.shape)
    return gW1, gb1, grad_input


def backward(trace, grad_embedding, params):
    """Exact gradients of ``sum(grad_embedding * embedding)``.

    Returns ``(ParamGrads, grad_input)``; only the trace's own stem and the
    shared head receive non-zero parameter gradients.
    """
    _check_trace(trace, params)
    grad_embedding = np.asarray(grad_embedding, dtype=np.float64)
    if grad_embedding.shape != trace.embedding.shape:
        raise TraceError(f"gradient shape {grad_embedding.shape} does not match "
                         f"embedding shape {trace.embedding.shape}")
    g_pre_norm = normalization_backward(trace.embedding, trace.norm, grad_embedding)
    K = g_pre_norm.shape[-1]
    flat_gp = g_pre_norm.reshape(-1, K)
    grads = params.zeros_like()
    grads.W2[...] = flat_gp.T @ trace.pooled.reshape(-1, trace.pooled.shape[-1])
    grads.b2[...] = flat_gp.sum(axis=0)
    g_pooled = g_pre_norm @ params.W2
    gW1, gb1, grad_input = backward_from_pooled(trace, g_pooled, params)
    getattr(grads, f"W1_{trace.view}")[...] = gW1
    getattr(grads, f"b1_{trace.view}")[...] = gb1
    return grads, grad_input


def save_checkpoint(path, params):
    """Binary checkpoint: magic ``CVCK``, version byte, u32 C C1 K, then the
    blocks of :data:`BLOCK_ORDER` as row-major float64 little-endian."""
    C, C1, K = params.dims
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, C, C1, K))
        for name in BLOCK_ORDER:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def _block_shapes(C, C1, K):
    return {"W1_street": (C1, C), "b1_street": (C1,), "W1_aerial": (C1, C),
            "b1_aerial": (C1,), "W2": (K, C1), "b2": (K,)}


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    magic, version, C, C1, K = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    offset = _CKPT_HEADER.size
    blocks = {}
    for name, shape in _block_shapes(C, C1, K).items():
        n = int(np.prod(shape))
        if offset + 8 * n > len(raw):
            raise FormatError(f"checkpoint truncated in block {name}", offset=len(raw))
        blocks[name] = np.frombuffer(raw, "<f8", n, offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes in checkpoint", offset=offset)
    return ModelParams(**blocks)
