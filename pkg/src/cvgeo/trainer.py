"""Training loop: batches, optional aerial rotation, mining, loss, Adam.

Schedule: the first ``warmup_epochs`` use the weighted soft-margin triplet
loss (``alpha = warmup_alpha``); afterwards ``cfg.loss`` takes over. The
learning rate is multiplied by ``lr_decay`` after every epoch.
"""

import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import model as M
from .data import rotate_batch, stack_pairs
from .errors import ConfigError, DivergenceError, EmptyBatchError, ShapeError
from .losses import (LossConfig, BatchSimilarities, binomial_loss, hard_triplet_loss,
                     pair_backward, pair_similarities, weighted_soft_margin_loss)
from .mining import MiningPool, batch_hardest
from .numerics import rng, spawn
from .retrieval import evaluate

REGIMES = ("aligned", "random_rotate")
MINING = ("none", "batch", "global")


@dataclass
class TrainingConfig:
    batch_pairs: int = 12
    epochs: int = 40
    warmup_epochs: int = 30
    warmup_alpha: float = 20.0
    lr: float = 1e-3
    lr_decay: float = 0.95
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alignment_regime: str = "random_rotate"
    mining: str = "global"
    r: int = 5
    pool_capacity: int = 0  # 0 means the whole training set
    pool_update_period: int = 1
    inbatch_negatives: bool = False
    calibrate_margins: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    C1: int = 32
    K: int = 64
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.alignment_regime not in REGIMES:
            raise ConfigError(f"unknown alignment_regime {self.alignment_regime!r}")
        if self.mining not in MINING:
            raise ConfigError(f"unknown mining {self.mining!r}")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError("need 0 <= warmup_epochs <= epochs")
        if self.batch_pairs < 1 or (self.mining == "batch" and self.batch_pairs < 2):
            raise ConfigError("batch_pairs must be >= 2 for in-batch mining (>= 1 otherwise)")
        if self.r < 1 or self.pool_capacity < 0 or self.pool_update_period < 1:
            raise ConfigError("r and pool_update_period must be >= 1 and pool_capacity >= 0")
        if not self.warmup_alpha > 0 or self.lr < 0:
            raise ConfigError("warmup_alpha must be positive and lr non-negative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config key: {unknown[0]}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: M.ModelParams
    v: M.ModelParams
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    state.step += 1
    t = state.step
    for name in M.BLOCK_ORDER:
        p = getattr(params, name)
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ShapeError(f"gradient block {name} has shape {g.shape}, expected {p.shape}")
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    loss_kind: str
    loss: float
    lr: float
    seconds: float
    recall1: float = float("nan")
    recall_top1pct: float = float("nan")
    sp_mean: float = float("nan")
    sp_var: float = float("nan")
    sn_mean: float = float("nan")
    sn_var: float = float("nan")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    margins: tuple = None
    final_similarities: dict = None

    @property
    def final(self):
        return self.epochs[-1] if self.epochs else None

    def as_dict(self):
        return {"epochs": [asdict(e) for e in self.epochs],
                "margins": list(self.margins) if self.margins else None}


def similarity_stats(street_embs, aerial_embs):
    """Mean/variance of matched (diagonal) and unmatched (off-diagonal) cosines."""
    sims = street_embs @ aerial_embs.T
    sp = np.diag(sims)
    sn = sims[~np.eye(len(sims), dtype=bool)]
    return {"sp_mean": float(sp.mean()), "sp_var": float(sp.var()),
            "sn_mean": float(sn.mean()), "sn_var": float(sn.var()), "s_p": sp, "s_n": sn}


def embed_pairs(params, pairs, rotations=None):
    S, A = stack_pairs(pairs)
    if rotations is not None:
        A = rotate_batch(A, rotations)
    return M.embed(params, "street", S), M.embed(params, "aerial", A)


def calibrate_margins(params, pairs):
    """``(mean s_n, mean s_p)`` over all pairs: the sources for ``m_p`` and ``m_n``."""
    if len(pairs) == 0:
        raise EmptyBatchError("margin calibration needs at least one pair")
    es, ea = embed_pairs(params, pairs)
    sims = es @ ea.T
    sp = np.diag(sims)
    if len(pairs) == 1:
        raise EmptyBatchError("margin calibration needs at least two pairs for negatives")
    sn = sims[~np.eye(len(sims), dtype=bool)]
    return float(sn.mean()), float(sp.mean())


def _negative_pairs(cfg, B, es, ea):
    """Street/aerial row pairs acting as negatives, with the positive each one opposes.

    Rows ``< B`` are batch members; rows ``>= B`` are freshly embedded mined
    samples. Returns ``(neg_pairs, neg_pos)`` where ``neg_pos[t]`` is the index
    of the positive pair opposed by triplet ``t``, and the list of distinct
    negative pairs for the binomial loss.
    """
    triplets = []  # (street_row, aerial_row, positive index)
    if cfg.mining == "none" or (cfg.mining == "global" and cfg.inbatch_negatives):
        for i in range(B):
            for j in range(B):
                if i != j:
                    triplets.append((i, j, i))  # street anchor i
                    triplets.append((i, j, j))  # aerial anchor j
    if cfg.mining == "batch":
        hard_a = batch_hardest(es, ea)
        hard_s = batch_hardest(ea, es)
        for i in range(B):
            triplets.append((i, int(hard_a[i]), i))
            triplets.append((int(hard_s[i]), i, i))
    if cfg.mining == "global":
        for i in range(B):
            triplets.append((i, B + i, i))
            triplets.append((B + i, i, i))
    return triplets


def _step_loss(loss_cfg, B, Xs, Xa, triplets):
    """Loss value and gradients on the street/aerial embedding rows."""
    pos_idx = np.column_stack([np.arange(B), np.arange(B)])
    trip = np.asarray(triplets, dtype=np.int64)
    neg_unique, inverse = np.unique(trip[:, :2], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    pos = pair_similarities(Xs, Xa, pos_idx)
    neg = pair_similarities(Xs, Xa, neg_unique)
    kind = loss_cfg.kind
    if kind in ("binomial_asym", "binomial_sym"):
        value, (g_p, g_n) = binomial_loss(BatchSimilarities(pos.s, neg.s), loss_cfg)
        gps = pair_backward(Xs, Xa, pos, grad_s=g_p)
        gns = pair_backward(Xs, Xa, neg, grad_s=g_n)
        return value, gps[0] + gns[0], gps[1] + gns[1]
    key = "sq_dist" if loss_cfg.distance == "squared_euclidean" else "dist"
    d_p = getattr(pos, key)[trip[:, 2]]
    d_n = getattr(neg, key)[inverse]
    if kind == "hard_triplet":
        value, (g_dp, g_dn) = hard_triplet_loss(d_p, d_n, loss_cfg.margin)
    else:
        value, (g_dp, g_dn) = weighted_soft_margin_loss(d_p, d_n, loss_cfg.alpha)
    gp_acc = np.bincount(trip[:, 2], weights=g_dp, minlength=B)
    gn_acc = np.bincount(inverse, weights=g_dn, minlength=len(neg_unique))
    kw = "grad_sq" if key == "sq_dist" else "grad_dist"
    gps = pair_backward(Xs, Xa, pos, **{kw: gp_acc})
    gns = pair_backward(Xs, Xa, neg, **{kw: gn_acc})
    return value, gps[0] + gns[0], gps[1] + gns[1]


def train(pairs, cfg, val_pairs=None, progress=None):
    """Train a two-stream model on ``pairs``. Returns ``(params, TrainReport)``.

    Deterministic for a given ``cfg`` (including ``cfg.seed``) and data.
    ``progress`` is called with each :class:`EpochRecord` if given.
    """
    if len(pairs) < 2:
        raise ConfigError("training needs at least two pairs")
    if cfg.batch_pairs > len(pairs):
        raise ConfigError("batch_pairs exceeds the number of training pairs")
    S, A = stack_pairs(pairs)
    ids = [p.id for p in pairs]
    N, C = len(pairs), S.shape[-1]
    B = cfg.batch_pairs
    rotate = cfg.alignment_regime == "random_rotate"
    init_seed, g = spawn(rng(cfg.seed), 2)
    params = M.init_params(C, cfg.C1, cfg.K, int(init_seed.integers(2**31)))
    state = AdamState.zeros(params)
    loss_cfg = cfg.loss
    report = TrainReport()
    pool = None
    if cfg.mining == "global":
        pool = MiningPool(cfg.pool_capacity or N, cfg.K, r=cfg.r,
                          update_period=cfg.pool_update_period)
        A0 = rotate_batch(A, g.uniform(0.0, 360.0, N)) if rotate else A
        pool.refresh_from_batch(ids, M.embed(params, "street", S), M.embed(params, "aerial", A0), 0)
    pos_of = {pid: k for k, pid in enumerate(ids)}

    def pick(cands):
        return cands[0][int(g.integers(len(cands[0])))]

    warm_cfg = LossConfig(kind="weighted_soft", alpha=cfg.warmup_alpha, distance=cfg.loss.distance)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr * cfg.lr_decay ** epoch
        if epoch == cfg.warmup_epochs and cfg.calibrate_margins:
            m_p, m_n = calibrate_margins(params, pairs)
            loss_cfg = replace(cfg.loss, m_p=m_p, m_n=m_n)
            report.margins = (m_p, m_n)
        active = warm_cfg if epoch < cfg.warmup_epochs else loss_cfg
        perm = g.permutation(N)
        losses = []
        for start in range(0, N - B + 1, B):
            idx = perm[start:start + B]
            s_in, a_in = S[idx], A[idx]
            if rotate:
                a_in = rotate_batch(a_in, g.uniform(0.0, 360.0, B))
            traces = [M.forward(params, "street", s_in), M.forward(params, "aerial", a_in)]
            if pool is not None:
                batch_ids = [ids[i] for i in idx]
                neg_s, neg_a = (
                    np.array([pos_of[pick(c)] for c in pool.top_candidates(view, traces[k].embedding, batch_ids)])
                    for k, view in ((1, "aerial"), (0, "street")))
                na_in = A[neg_a]
                if rotate:
                    na_in = rotate_batch(na_in, g.uniform(0.0, 360.0, B))
                traces += [M.forward(params, "street", S[neg_s]), M.forward(params, "aerial", na_in)]
            Xs = np.concatenate([traces[k].embedding for k in range(0, len(traces), 2)])
            Xa = np.concatenate([traces[k].embedding for k in range(1, len(traces), 2)])
            triplets = _negative_pairs(cfg, B, Xs[:B], Xa[:B])
            value, g_s, g_a = _step_loss(active, B, Xs, Xa, triplets)
            if not np.isfinite(value):
                raise DivergenceError("non-finite loss", step)
            grads = params.zeros_like()
            for k, tr in enumerate(traces):
                rows = slice(B * (k // 2), B * (k // 2 + 1))
                grads += M.backward(tr, (g_s if k % 2 == 0 else g_a)[rows], params)[0]
            adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            if pool is not None:
                pool.stage(batch_ids, traces[0].embedding, traces[1].embedding, step)
            losses.append(value)
            step += 1
        rec = EpochRecord(epoch, active.kind, float(np.mean(losses)), lr, 0.0)
        if val_pairs:
            es, ea = embed_pairs(params, val_pairs)
            r = evaluate(es, ea, [p.id for p in val_pairs])
            st = similarity_stats(es, ea)
            rec.recall1, rec.recall_top1pct = r.recall[1], r.recall_top1pct
            rec.sp_mean, rec.sp_var = st["sp_mean"], st["sp_var"]
            rec.sn_mean, rec.sn_var = st["sn_mean"], st["sn_var"]
        rec.seconds = time.perf_counter() - t0
        report.epochs.append(rec)
        if progress is not None:
            progress(rec)
    return params, report


def rotated_copies(pairs, seed):
    """Pairs with every aerial map rotated by an angle drawn from ``U[0, 360)``."""
    from .data import CrossViewPair
    g = rng(seed)
    S, A = stack_pairs(pairs)
    phis = g.uniform(0.0, 360.0, len(pairs))
    A = rotate_batch(A, phis)
    return [CrossViewPair(p.id, p.street, a, float(phi)) for p, a, phi in zip(pairs, A, phis)]


def evaluate_pairs(params, pairs):
    es, ea = embed_pairs(params, pairs)
    return evaluate(es, ea, [p.id for p in pairs])


def alignment_matrix(cfg, train_pairs, val_pairs, rotation_seed=12345):
    """Top-1 recall of aligned- and rotate-trained models on aligned and rotated validation.

    Returns ``{"aligned": {"aligned": r, "rotated": r}, "random_rotate": {...}}``
    along with the trained models.
    """
    val_rot = rotated_copies(val_pairs, rotation_seed)
    table, models = {}, {}
    for regime in REGIMES:
        params, _ = train(train_pairs, replace(cfg, alignment_regime=regime))
        models[regime] = params
        table[regime] = {
            "aligned": evaluate_pairs(params, val_pairs).recall[1],
            "rotated": evaluate_pairs(params, val_rot).recall[1],
        }
    return table, models
