"""Hard-negative selection: a FIFO pool of recent embeddings and in-batch mining."""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmallError, NormalizationError, PoolEmptyError, ShapeError

VIEWS = ("street", "aerial")


def opposite(view):
    return "aerial" if view == "street" else "street"


@dataclass
class NegativeSelection:
    anchor_id: str
    selected_id: str
    similarity: float
    candidate_set: list


class _Ring:
    """Fixed-capacity FIFO keyed by pair id, backed by a preallocated matrix."""

    def __init__(self, capacity, dim):
        self.capacity = capacity
        self.matrix = np.zeros((capacity, dim))
        self.slot_id = [None] * capacity
        self.step = np.zeros(capacity, dtype=np.int64)
        self.order = OrderedDict()  # pair_id -> slot, oldest first
        self.free = list(range(capacity - 1, -1, -1))

    def push(self, pair_id, emb, step):
        if pair_id in self.order:
            slot = self.order.pop(pair_id)
        elif self.free:
            slot = self.free.pop()
        else:
            _, slot = self.order.popitem(last=False)
        self.order[pair_id] = slot
        self.slot_id[slot] = pair_id
        self.matrix[slot] = emb
        self.step[slot] = step

    def __len__(self):
        return len(self.order)


class MiningPool:
    """Per-view FIFO rings of ``(pair_id, embedding, step)``.

    Re-pushing a pair id replaces its entry and moves it to the back of the
    queue. When full, the oldest entry is evicted.
    """

    def __init__(self, capacity, dim, r=1, update_period=1):
        if capacity < 1 or r < 1 or update_period < 1:
            raise ValueError("capacity, r and update_period must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.r = r
        self.update_period = update_period
        self._rings = {v: _Ring(capacity, dim) for v in VIEWS}
        self._staged = []

    def push(self, view, pair_id, embedding, step):
        emb = np.asarray(embedding, dtype=np.float64)
        if emb.shape != (self.dim,):
            raise ShapeError(f"embedding has shape {emb.shape}, pool expects ({self.dim},)")
        if abs(np.linalg.norm(emb) - 1.0) > 1e-6:
            raise NormalizationError("pool entries must be unit-norm")
        self._rings[view].push(pair_id, emb, step)

    def size(self, view):
        return len(self._rings[view])

    def ids(self, view):
        """Live pair ids, oldest first."""
        return list(self._rings[view].order)

    def entries(self, view):
        ring = self._rings[view]
        return [(pid, ring.matrix[slot].copy(), int(ring.step[slot]))
                for pid, slot in ring.order.items()]

    def snapshot(self, view):
        """``(ids, matrix, steps)`` of live entries in FIFO order."""
        ring = self._rings[view]
        slots = list(ring.order.values())
        return list(ring.order), ring.matrix[slots].copy(), ring.step[slots].copy()

    def top_candidates(self, anchor_view, anchors, anchor_ids, r=None):
        """Top-``r`` most similar opposite-view entries for each anchor row.

        The anchor's own pair id is never a candidate. Ties in similarity go
        to the smaller pair id. Returns a list of ``(ids, sims)`` per anchor.
        """
        r = self.r if r is None else r
        ring = self._rings[opposite(anchor_view)]
        if len(ring) == 0:
            raise PoolEmptyError(f"{opposite(anchor_view)} pool is empty")
        ids = list(ring.order)
        slots = np.fromiter(ring.order.values(), dtype=np.int64, count=len(ids))
        mat = ring.matrix[slots]
        # rank of each id in sorted order breaks ties deterministically
        id_rank = np.empty(len(ids), dtype=np.int64)
        id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
        anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
        sims = anchors @ mat.T
        pos = {pid: k for k, pid in enumerate(ids)}
        out = []
        for row, aid in zip(sims, anchor_ids):
            eligible = np.ones(len(ids), dtype=bool)
            if aid in pos:
                eligible[pos[aid]] = False
            cand = np.flatnonzero(eligible)
            if cand.size == 0:
                raise PoolEmptyError(f"no eligible negatives for {aid!r}")
            k = min(r, cand.size)
            vals = row[cand]
            if k < cand.size:
                # keep everything tied with the k-th value, then order exactly
                kth = np.partition(-vals, k - 1)[k - 1]
                keep = -vals <= kth
                cand, vals = cand[keep], vals[keep]
            order = np.lexsort((id_rank[cand], -vals))[:k]
            out.append(([ids[c] for c in cand[order]], vals[order]))
        return out

    def hardest_negatives(self, anchor_view, anchor, anchor_pair_id, r, stream):
        """Pick one of the ``r`` hardest opposite-view negatives uniformly at random."""
        (ids, sims), = self.top_candidates(anchor_view, anchor, [anchor_pair_id], r)
        k = int(stream.integers(len(ids)))
        return NegativeSelection(anchor_pair_id, ids[k], float(sims[k]), ids)

    def refresh_from_batch(self, pair_ids, street_embs, aerial_embs, step):
        """Push every batch embedding of both views."""
        for pid, s, a in zip(pair_ids, street_embs, aerial_embs):
            self.push("street", pid, s, step)
            self.push("aerial", pid, a, step)

    def stage(self, pair_ids, street_embs, aerial_embs, step):
        """Queue a batch; staged entries reach the pool every ``update_period`` steps."""
        self._staged.append((list(pair_ids), np.array(street_embs), np.array(aerial_embs), step))
        if (step + 1) % self.update_period == 0:
            self.flush()

    def flush(self):
        for batch in self._staged:
            self.refresh_from_batch(*batch)
        self._staged = []


def batch_hardest(anchors, candidates):
    """Index of the hardest in-batch negative for each anchor.

    ``candidates[i]`` is the positive of ``anchors[i]`` and is excluded;
    ties go to the lower index.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if anchors.shape[0] < 2:
        raise BatchTooSmallError("in-batch mining needs at least two pairs")
    if anchors.shape != candidates.shape:
        raise ShapeError("anchors and candidates must have matching shapes")
    sims = anchors @ candidates.T
    np.fill_diagonal(sims, -np.inf)
    return np.argmax(sims, axis=1)
