"""Cross-view pairs: synthetic generation, aerial rotation and file ingestion.

Angle conventions shared with :mod:`cvgeo.orientation`:

* street panorama column ``c`` of ``W_s`` sits at azimuth ``360 * c / W_s``
  (its centre at ``360 * (c + 0.5) / W_s``);
* aerial pixel ``(row, col)`` sits at the polar angle about the image centre
  measured from straight down (south) and increasing clockwise, so the pixel
  left of centre is at 90 degrees.

Rotating an aerial map by ``phi`` moves content at angle ``theta`` to
``theta + phi``.
"""

import json
import math
import os
import struct
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, ManifestError, ShapeError
from .numerics import rng

CVFM_MAGIC = b"CVFM"
CVFM_VERSION = 1
_CVFM_HEADER = struct.Struct("<4sB3I")


@dataclass
class CrossViewPair:
    id: str
    street: np.ndarray
    aerial: np.ndarray
    rotation_deg: Optional[float] = None

    def __post_init__(self):
        self.street = as_tensor3(self.street)
        self.aerial = as_tensor3(self.aerial)
        if self.aerial.shape[0] != self.aerial.shape[1]:
            raise ShapeError(f"aerial map of pair {self.id!r} is not square: {self.aerial.shape}")


@dataclass
class ManifestEntry:
    id: str
    street_path: str
    aerial_path: str
    rotation_deg: Optional[float] = None


@dataclass
class DatasetManifest:
    entries: list
    split: str = "train"
    root: str = "."

    def load_pairs(self):
        pairs = []
        for e in self.entries:
            pairs.append(CrossViewPair(
                id=e.id,
                street=read_feature_map(os.path.join(self.root, e.street_path)),
                aerial=read_feature_map(os.path.join(self.root, e.aerial_path)),
                rotation_deg=e.rotation_deg,
            ))
        return pairs


@dataclass
class SyntheticConfig:
    """Parameters of the planted cross-view generator.

    Every pair shares a latent scene vector between its two views. Each view
    sees it through a fixed random linear transform (drawn from
    ``world_seed``) in three components: a spatially constant "coarse"
    component corrupted by ``noise_sigma``, a lattice-scale checkerboard
    "texture" component corrupted by ``texture_noise``, and a landmark
    (a bump at one panorama azimuth, a ridge from the aerial centre in the
    same direction) corrupted by ``noise_sigma``. The texture survives only
    lattice-preserving rotations, so it is the cue that alignment provides.
    """

    n_pairs: int = 1000
    latent_dim: int = 16
    noise_sigma: float = 0.3
    H_s: int = 4
    W_s: int = 64
    H_a: int = 32
    channels: int = 8
    seed: int = 0
    world_seed: int = 0
    coarse_gain: float = 1.0
    texture_gain: float = 1.0
    texture_noise: float = 0.1
    texture_base: float = 0.0
    landmark_gain: float = 3.0
    pixel_noise: float = 0.05
    bump_width_deg: float = 4.0
    ridge_width_px: float = 1.0
    symmetric_ridge: bool = False
    split_subspaces: bool = True
    rotate: bool = False
    integer_rotations: bool = False
    id_prefix: str = "p"

    def __post_init__(self):
        for name in ("n_pairs", "latent_dim", "H_s", "W_s", "H_a", "channels"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("noise_sigma", "texture_noise", "pixel_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic config key: {unknown[0]}")
        return cls(**d)


def as_tensor3(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or min(t.shape) < 1:
        raise ShapeError(f"expected an H x W x C tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ShapeError("tensor has non-finite entries")
    return t


def disk_mask(size):
    """Boolean mask of pixels within radius ``size / 2`` of the grid centre."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    return np.hypot(yy - c, xx - c) <= size / 2.0


def polar_angles(size):
    """Clockwise-from-south angle in degrees [0, 360) and radius of each pixel."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - c
    dx = xx - c
    theta = np.degrees(np.arctan2(-dx, dy)) % 360.0
    return theta, np.hypot(dy, dx)


def _cos_sin_deg(phi):
    phi = float(phi) % 360.0
    quarter = phi / 90.0
    if quarter == int(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(quarter)]
    r = math.radians(phi)
    return math.cos(r), math.sin(r)


def rotate_aerial(t, phi_deg):
    """Rotate a square map about its centre by ``phi_deg`` (clockwise on screen).

    Bilinear resampling; source samples outside the grid read as zero and the
    circular validity mask is applied before and after resampling.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[0] != t.shape[1]:
        raise ShapeError(f"rotate_aerial needs a square H x H x C tensor, got {t.shape}")
    return rotate_batch(t[None], np.array([phi_deg], dtype=np.float64))[0]


def rotate_batch(ts, phis):
    """Vectorised :func:`rotate_aerial` over a stack of shape (N, H, H, C)."""
    ts = np.asarray(ts, dtype=np.float64)
    n, h, w, ch = ts.shape
    if h != w:
        raise ShapeError(f"aerial maps must be square, got {h}x{w}")
    mask = disk_mask(h)
    c = (h - 1) / 2.0
    yy, xx = np.nonzero(mask)
    dy = (yy - c)[None]
    dx = (xx - c)[None]
    cs = np.array([_cos_sin_deg(p) for p in np.atleast_1d(phis)])
    cos = cs[:, 0, None]
    sin = cs[:, 1, None]
    ys = c + dy * cos - dx * sin
    xs = c + dx * cos + dy * sin
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    # four bilinear taps per in-disk output pixel: (n, P, 4)
    ty = y0[..., None] + np.array([0, 0, 1, 1])
    tx = x0[..., None] + np.array([0, 1, 0, 1])
    w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1)
    inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < h)
    tyc, txc = np.clip(ty, 0, h - 1), np.clip(tx, 0, h - 1)
    w = np.where(inside & mask[tyc, txc], w, 0.0)
    lin = (np.arange(n) * (h * h))[:, None, None] + tyc * h + txc
    vals = np.take(ts.reshape(n * h * h, ch), lin, axis=0)
    out = np.zeros((n, h, h, ch))
    out[:, yy, xx] = np.einsum("npk,npkc->npc", w, vals)
    return out


def _circ_dist_deg(a, b):
    d = np.abs((np.asarray(a) - b) % 360.0)
    return np.minimum(d, 360.0 - d)


class SyntheticWorld:
    """The fixed per-view transforms shared by every pair drawn from one world.

    With ``split_subspaces`` the texture component occupies channel
    directions orthogonal to the coarse and landmark components.
    """

    def __init__(self, cfg):
        g = rng(cfg.world_seed)
        C, L = cfg.channels, cfg.latent_dim
        scale = 1.0 / math.sqrt(L)
        self.cfg = cfg
        self.coarse, self.texture, self.landmark = {}, {}, {}
        for v in ("street", "aerial"):
            mix = [g.normal(0.0, scale, (C, L)) for _ in range(3)]
            if cfg.split_subspaces and 2 * L <= C:
                # texture lives in channels orthogonal to everything else
                basis, _ = np.linalg.qr(g.normal(size=(C, C)))
                lo, hi = basis[:, :L], basis[:, L:2 * L]
                mix = [lo @ (lo.T @ mix[0]), hi @ (hi.T @ mix[1]), lo @ (lo.T @ mix[2])]
            self.coarse[v], self.texture[v], self.landmark[v] = mix
        # lattice pattern common to every scene, along a random texture direction
        self.texture_base = {v: self.texture[v] @ g.normal(size=L) for v in ("street", "aerial")}

    def _texture(self, view, obs):
        cfg = self.cfg
        return cfg.texture_base * self.texture_base[view] + cfg.texture_gain * (self.texture[view] @ obs)

    def street_map(self, coarse_obs, texture_obs, landmark_obs, azimuth, noise):
        cfg = self.cfg
        H, W = cfg.H_s, cfg.W_s
        theta = 360.0 * (np.arange(W) + 0.5) / W
        bump = np.exp(-0.5 * (_circ_dist_deg(theta, azimuth) / cfg.bump_width_deg) ** 2)
        if cfg.symmetric_ridge:
            bump = np.maximum(bump, np.exp(
                -0.5 * (_circ_dist_deg(theta, azimuth + 180.0) / cfg.bump_width_deg) ** 2))
        rr, cc = np.mgrid[0:H, 0:W]
        checker = np.where((rr + cc) % 2 == 0, 1.0, -1.0)
        t = cfg.coarse_gain * (self.coarse["street"] @ coarse_obs)[None, None, :]
        t = t + checker[..., None] * self._texture("street", texture_obs)
        t = t + cfg.landmark_gain * bump[None, :, None] * (self.landmark["street"] @ landmark_obs)
        return t + noise

    def aerial_map(self, coarse_obs, texture_obs, landmark_obs, azimuth, noise):
        cfg = self.cfg
        H = cfg.H_a
        c = (H - 1) / 2.0
        yy, xx = np.mgrid[0:H, 0:H]
        dy, dx = yy - c, xx - c
        a = math.radians(azimuth)
        uy, ux = math.cos(a), -math.sin(a)
        along = dy * uy + dx * ux
        perp = dy * ux - dx * uy
        if cfg.symmetric_ridge:
            along = np.abs(along)
        ramp = np.clip((along - 1.0) / 3.0, 0.0, 1.0)
        ridge = ramp * np.exp(-0.5 * (perp / cfg.ridge_width_px) ** 2)
        checker = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
        t = cfg.coarse_gain * (self.coarse["aerial"] @ coarse_obs)[None, None, :]
        t = t + checker[..., None] * self._texture("aerial", texture_obs)
        t = t + cfg.landmark_gain * ridge[..., None] * (self.landmark["aerial"] @ landmark_obs)
        t = t + noise
        return t * disk_mask(H)[..., None]


def _f32(t):
    return t.astype(np.float32).astype(np.float64)


def generate_synthetic(cfg):
    """Draw ``cfg.n_pairs`` planted pairs; a pure function of ``cfg``.

    Values are rounded to float32 so that writing them to CVFM files and
    reading them back reproduces the in-memory dataset exactly.
    """
    world = SyntheticWorld(cfg)
    g = rng(cfg.seed)
    L, C = cfg.latent_dim, cfg.channels
    width = max(4, len(str(cfg.n_pairs - 1)))
    pairs = []
    for i in range(cfg.n_pairs):
        z = g.normal(size=L)
        col = int(g.integers(cfg.W_s))
        azimuth = 360.0 * (col + 0.5) / cfg.W_s
        obs = {}
        for view in ("street", "aerial"):
            obs[view] = (
                z + cfg.noise_sigma * g.normal(size=L),
                z + cfg.texture_noise * g.normal(size=L),
                z + cfg.noise_sigma * g.normal(size=L),
            )
        s_noise = cfg.pixel_noise * g.normal(size=(cfg.H_s, cfg.W_s, C))
        a_noise = cfg.pixel_noise * g.normal(size=(cfg.H_a, cfg.H_a, C))
        street = world.street_map(*obs["street"], azimuth, s_noise)
        aerial = world.aerial_map(*obs["aerial"], azimuth, a_noise)
        rotation = None
        if cfg.rotate:
            rotation = float(g.integers(360)) if cfg.integer_rotations else float(g.uniform(0.0, 360.0))
            aerial = rotate_aerial(aerial, rotation)
        pairs.append(CrossViewPair(
            id=f"{cfg.id_prefix}{i:0{width}d}",
            street=_f32(street),
            aerial=_f32(aerial),
            rotation_deg=rotation,
        ))
    return pairs


def write_feature_map(path, t):
    """Write a tensor as CVFM: magic, version, u32 H W C, float32 values (LE)."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise ShapeError(f"expected an H x W x C tensor, got shape {t.shape}")
    h, w, c = t.shape
    header = _CVFM_HEADER.pack(CVFM_MAGIC, CVFM_VERSION, h, w, c)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_feature_map(path):
    """Read a CVFM file into a float32 array of shape (H, W, C), bits untouched."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_feature_map(raw)


def parse_feature_map(raw):
    if len(raw) < _CVFM_HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes", offset=len(raw))
    magic, version, h, w, c = _CVFM_HEADER.unpack_from(raw, 0)
    if magic != CVFM_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != CVFM_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if h == 0 or w == 0 or c == 0:
        raise FormatError("zero dimension in header", offset=5)
    count = h * w * c
    need = _CVFM_HEADER.size + 4 * count
    if need > len(raw):
        raise FormatError(
            f"header claims {h}x{w}x{c} values ({need} bytes) but file has {len(raw)} bytes",
            offset=len(raw))
    if need < len(raw):
        raise FormatError(f"{len(raw) - need} trailing bytes", offset=need)
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_CVFM_HEADER.size)
    # widening to float64 would quiet signalling NaNs, so keep the stored width
    return data.astype(np.float32).reshape(h, w, c)


def load_manifest(path, split="train"):
    """Parse and validate a JSON manifest; paths resolve relative to its folder."""
    if not os.path.isfile(path):
        raise ManifestError(f"manifest not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(doc, list):
        raise ManifestError("manifest must be a JSON array of objects")
    root = os.path.dirname(os.path.abspath(path))
    seen = set()
    entries = []
    for i, obj in enumerate(doc):
        if not isinstance(obj, dict):
            raise ManifestError(f"entry {i} is not an object")
        extra = set(obj) - {"id", "street_path", "aerial_path", "rotation_deg"}
        if extra:
            raise ManifestError(f"entry {i} has unknown key {sorted(extra)[0]!r}")
        for key in ("id", "street_path", "aerial_path"):
            if not isinstance(obj.get(key), str):
                raise ManifestError(f"entry {i}: {key} must be a string")
        if obj["id"] in seen:
            raise ManifestError(f"duplicate id {obj['id']!r}")
        seen.add(obj["id"])
        rot = obj.get("rotation_deg")
        if rot is not None:
            if isinstance(rot, bool) or not isinstance(rot, (int, float)) or not 0.0 <= rot < 360.0:
                raise ManifestError(f"entry {obj['id']!r}: rotation_deg {rot!r} outside [0, 360)")
            rot = float(rot)
        for key in ("street_path", "aerial_path"):
            full = os.path.join(root, obj[key])
            if not os.path.isfile(full):
                raise ManifestError(f"entry {obj['id']!r}: dangling path {obj[key]!r}")
        entries.append(ManifestEntry(obj["id"], obj["street_path"], obj["aerial_path"], rot))
    return DatasetManifest(entries=entries, split=split, root=root)


def write_dataset(pairs, directory, manifest_name="manifest.json"):
    """Write pairs as CVFM files plus a manifest; returns the manifest path."""
    os.makedirs(os.path.join(directory, "maps"), exist_ok=True)
    doc = []
    for p in pairs:
        s = os.path.join("maps", f"{p.id}_street.cvfm")
        a = os.path.join("maps", f"{p.id}_aerial.cvfm")
        write_feature_map(os.path.join(directory, s), p.street)
        write_feature_map(os.path.join(directory, a), p.aerial)
        entry = {"id": p.id, "street_path": s, "aerial_path": a}
        if p.rotation_deg is not None:
            entry["rotation_deg"] = p.rotation_deg
        doc.append(entry)
    path = os.path.join(directory, manifest_name)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def stack_pairs(pairs):
    """Stack a homogeneous list of pairs into (N, H, W, C) street/aerial arrays."""
    if not pairs:
        raise ShapeError("no pairs to stack")
    s_shape, a_shape = pairs[0].street.shape, pairs[0].aerial.shape
    for p in pairs:
        if p.street.shape != s_shape or p.aerial.shape != a_shape:
            raise ShapeError(f"pair {p.id!r} has shapes {p.street.shape}/{p.aerial.shape}, "
                             f"expected {s_shape}/{a_shape}")
    return np.stack([p.street for p in pairs]), np.stack([p.aerial for p in pairs])
