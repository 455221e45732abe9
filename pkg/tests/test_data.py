import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cvgeo.data import (CrossViewPair, SyntheticConfig, SyntheticWorld, disk_mask,
                        generate_synthetic, load_manifest, parse_feature_map, polar_angles,
                        read_feature_map, rotate_aerial, rotate_batch, stack_pairs,
                        write_dataset, write_feature_map)
from cvgeo.errors import ConfigError, FormatError, ManifestError, ShapeError


def blob(size=33, channels=2, center=(20.0, 12.0), width=3.0):
    yy, xx = np.mgrid[0:size, 0:size]
    g = np.exp(-((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2 * width ** 2))
    return np.stack([g * (k + 1) for k in range(channels)], axis=-1)


class TestRotate:
    def test_zero_is_identity_inside_mask(self, gen):
        t = gen.normal(size=(16, 16, 3))
        m = disk_mask(16)[..., None]
        np.testing.assert_array_equal(rotate_aerial(t, 0.0), t * m)

    @pytest.mark.parametrize("size", [16, 17])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_quarter_turns_match_index_rotation(self, size, k, gen):
        t = gen.normal(size=(size, size, 2)) * disk_mask(size)[..., None]
        got = rotate_aerial(t, 90.0 * k)
        want = np.rot90(t, k=-k, axes=(0, 1))
        assert np.max(np.abs(got - want)) <= 1e-12

    @pytest.mark.parametrize("phi", [17.0, 45.0, 133.3, 270.5])
    def test_round_trip_on_smooth_blob(self, phi):
        t = blob()
        back = rotate_aerial(rotate_aerial(t, phi), -phi)
        c = (33 - 1) / 2
        yy, xx = np.mgrid[0:33, 0:33]
        inner = np.hypot(yy - c, xx - c) <= 33 / 2 - 2
        assert np.max(np.abs(back - t)[inner]) <= 0.05 * np.abs(t).max()

    @pytest.mark.parametrize("phi", [10.0, 33.0, 60.0, 201.0])
    def test_mass_preserved(self, phi):
        t = blob(size=40, center=(24.0, 15.0))
        mask = disk_mask(40)[..., None]
        before = (t * mask).sum()
        after = rotate_aerial(t, phi).sum()
        assert abs(after - before) <= 0.02 * before

    def test_direction_convention(self):
        # content straight below the centre (0 deg) moves to the left (90 deg)
        t = np.zeros((9, 9, 1))
        t[7, 4, 0] = 1.0
        out = rotate_aerial(t, 90.0)
        assert out[4, 1, 0] == 1.0
        theta, _ = polar_angles(9)
        assert theta[7, 4] == 0.0 and theta[4, 1] == 90.0

    def test_non_square(self):
        with pytest.raises(ShapeError):
            rotate_aerial(np.zeros((4, 5, 1)), 10.0)

    def test_batch_matches_single(self, gen):
        ts = gen.normal(size=(3, 12, 12, 2))
        phis = [5.0, 90.0, 301.0]
        out = rotate_batch(ts, phis)
        for t, p, o in zip(ts, phis, out):
            np.testing.assert_array_equal(rotate_aerial(t, p), o)


class TestFeatureMap:
    def test_round_trip(self, tmp_path, gen):
        t = gen.normal(size=(4, 4, 2)).astype(np.float32)
        write_feature_map(tmp_path / "a.cvfm", t)
        got = read_feature_map(tmp_path / "a.cvfm")
        assert got.dtype == np.float32 and got.tobytes() == t.tobytes()

    def test_any_bit_pattern(self, tmp_path, gen):
        # includes NaNs with payloads, signalling NaNs and infinities
        bits = gen.integers(0, 2**32, size=(6, 7, 3), dtype=np.uint64).astype(np.uint32)
        bits[0, 0, :] = [0x7F800001, 0xFFC00123, 0x7F800000]
        t = bits.view(np.float32)
        write_feature_map(tmp_path / "b.cvfm", t)
        assert read_feature_map(tmp_path / "b.cvfm").view(np.uint32).tobytes() == bits.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3)),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
    def test_bit_exact_any_finite(self, t):
        raw = struct.pack("<4sB3I", b"CVFM", 1, *t.shape) + t.astype("<f4").tobytes()
        got = parse_feature_map(raw).astype("<f4")
        assert got.tobytes() == t.astype("<f4").tobytes()

    def test_edge_values(self, tmp_path):
        f = np.finfo(np.float32)
        vals = np.array([0.0, -0.0, f.max, -f.max, f.tiny, f.smallest_subnormal, -f.smallest_subnormal,
                         1.0, -1.0, np.nextafter(np.float32(1), np.float32(2))], dtype=np.float32)
        t = vals.reshape(1, 5, 2)
        write_feature_map(tmp_path / "e.cvfm", t)
        got = read_feature_map(tmp_path / "e.cvfm").astype(np.float32)
        assert got.tobytes() == t.tobytes()
        assert np.signbit(got[0, 0, 1])

    def test_layout(self, tmp_path):
        t = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
        write_feature_map(tmp_path / "l.cvfm", t)
        raw = (tmp_path / "l.cvfm").read_bytes()
        assert raw[:4] == b"CVFM" and raw[4] == 1
        assert struct.unpack("<3I", raw[5:17]) == (2, 3, 2)
        assert np.frombuffer(raw[17:], "<f4").tolist() == list(range(12))

    @pytest.mark.parametrize("raw, offset", [
        (b"XXXX\x01" + struct.pack("<3I", 1, 1, 1) + b"\0" * 4, 0),
        (b"CVFM\x02" + struct.pack("<3I", 1, 1, 1) + b"\0" * 4, 4),
        (b"CVFM\x01" + struct.pack("<3I", 2, 2, 2) + b"\0" * 4, 21),
        (b"CVFM\x01" + struct.pack("<3I", 1, 1, 1) + b"\0" * 8, 21),
        (b"CVFM", 4),
    ])
    def test_format_errors(self, raw, offset):
        with pytest.raises(FormatError) as exc:
            parse_feature_map(raw)
        assert exc.value.offset == offset
        assert "byte offset" in str(exc.value)

    def test_dimension_overflow(self):
        raw = b"CVFM\x01" + struct.pack("<3I", 2**32 - 1, 2**32 - 1, 2**32 - 1)
        with pytest.raises(FormatError):
            parse_feature_map(raw)


class TestManifest:
    def _write(self, tmp_path, entries):
        (tmp_path / "m").mkdir(exist_ok=True)
        for name in ("s.cvfm", "a.cvfm"):
            write_feature_map(tmp_path / "m" / name, np.zeros((2, 2, 1)))
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps(entries))
        return p

    def entry(self, i, **kw):
        return {"id": i, "street_path": "m/s.cvfm", "aerial_path": "m/a.cvfm", **kw}

    def test_two_entries(self, tmp_path):
        man = load_manifest(self._write(tmp_path, [self.entry("a"), self.entry("b", rotation_deg=10)]))
        assert len(man.entries) == 2
        assert man.entries[1].rotation_deg == 10.0
        assert len(man.load_pairs()) == 2

    @pytest.mark.parametrize("entries", [
        [{"id": "a", "street_path": "m/s.cvfm", "aerial_path": "m/a.cvfm"}] * 2,
        [{"id": "a", "street_path": "m/s.cvfm", "aerial_path": "m/a.cvfm", "rotation_deg": 370}],
        [{"id": "a", "street_path": "m/s.cvfm", "aerial_path": "m/a.cvfm", "rotation_deg": -1}],
        [{"id": "a", "street_path": "m/nope.cvfm", "aerial_path": "m/a.cvfm"}],
        [{"id": "a", "street_path": "m/s.cvfm", "aerial_path": "m/a.cvfm", "extra": 1}],
        [{"id": 3, "street_path": "m/s.cvfm", "aerial_path": "m/a.cvfm"}],
        {"id": "a"},
    ])
    def test_rejects(self, tmp_path, entries):
        with pytest.raises(ManifestError):
            load_manifest(self._write(tmp_path, entries))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "none.json")

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("[{")
        with pytest.raises(ManifestError):
            load_manifest(p)


SMALL = dict(n_pairs=6, H_s=2, W_s=16, H_a=12, channels=8, latent_dim=4)


class TestGenerator:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticConfig(**SMALL, seed=3))
        b = generate_synthetic(SyntheticConfig(**SMALL, seed=3))
        for p, q in zip(a, b):
            assert p.id == q.id
            assert p.street.tobytes() == q.street.tobytes()
            assert p.aerial.tobytes() == q.aerial.tobytes()

    def test_seed_changes_pairs_not_world(self):
        a = generate_synthetic(SyntheticConfig(**SMALL, seed=1))
        b = generate_synthetic(SyntheticConfig(**SMALL, seed=2))
        assert not np.array_equal(a[0].street, b[0].street)
        wa = SyntheticWorld(SyntheticConfig(**SMALL, seed=1))
        wb = SyntheticWorld(SyntheticConfig(**SMALL, seed=2))
        assert np.array_equal(wa.coarse["street"], wb.coarse["street"])

    def test_shapes_and_mask(self):
        pairs = generate_synthetic(SyntheticConfig(**SMALL))
        assert pairs[0].street.shape == (2, 16, 8)
        assert pairs[0].aerial.shape == (12, 12, 8)
        outside = ~disk_mask(12)
        assert np.all(pairs[0].aerial[outside] == 0.0)
        assert all(p.rotation_deg is None for p in pairs)

    def test_noiseless_pairs_match_under_generating_transform(self):
        cfg = SyntheticConfig(n_pairs=40, channels=8, latent_dim=4, noise_sigma=0.0,
                              texture_gain=0.0, landmark_gain=0.0, pixel_noise=0.0,
                              H_s=2, W_s=16, H_a=12)
        world = SyntheticWorld(cfg)
        pairs = generate_synthetic(cfg)
        m = disk_mask(12)
        zs = np.array([np.linalg.lstsq(world.coarse["street"], p.street.mean(axis=(0, 1)), rcond=None)[0]
                       for p in pairs])
        za = np.array([np.linalg.lstsq(world.coarse["aerial"], p.aerial[m].mean(axis=0), rcond=None)[0]
                       for p in pairs])
        zs /= np.linalg.norm(zs, axis=1, keepdims=True)
        za /= np.linalg.norm(za, axis=1, keepdims=True)
        sims = zs @ za.T
        assert np.array_equal(np.argmax(sims, axis=1), np.arange(40))

    def test_ridge_points_at_street_peak(self):
        cfg = SyntheticConfig(n_pairs=5, channels=8, latent_dim=4, noise_sigma=0.0, texture_gain=0.0,
                              coarse_gain=0.0, pixel_noise=0.0, W_s=72, H_a=33, landmark_gain=1.0)
        theta, radius = polar_angles(33)
        for p in generate_synthetic(cfg):
            col = int(np.argmax(np.abs(p.street).sum(axis=(0, 2))))
            az = 360.0 * (col + 0.5) / 72
            energy = np.abs(p.aerial).sum(axis=2)
            strong = energy > 0.5 * energy.max()
            d = np.abs((theta[strong] - az + 180) % 360 - 180)
            assert np.average(d, weights=energy[strong]) < 5.0

    def test_rotated_generation(self):
        cfg = SyntheticConfig(**SMALL, rotate=True, integer_rotations=True)
        for p in generate_synthetic(cfg):
            assert p.rotation_deg == int(p.rotation_deg)
            assert 0 <= p.rotation_deg < 360

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(n_pairs=0)
        with pytest.raises(ConfigError, match="bogus"):
            SyntheticConfig.from_dict({"bogus": 1})

    def test_dataset_round_trip(self, tmp_path):
        pairs = generate_synthetic(SyntheticConfig(**SMALL, rotate=True))
        path = write_dataset(pairs, tmp_path)
        back = load_manifest(path).load_pairs()
        for p, q in zip(pairs, back):
            assert p.id == q.id and p.rotation_deg == q.rotation_deg
            assert p.street.tobytes() == q.street.tobytes()
            assert p.aerial.tobytes() == q.aerial.tobytes()


def test_pair_rejects_non_square():
    with pytest.raises(ShapeError):
        CrossViewPair("x", np.zeros((2, 4, 1)), np.zeros((3, 4, 1)))


def test_stack_pairs_shape_mismatch():
    a = CrossViewPair("a", np.zeros((2, 4, 1)), np.zeros((4, 4, 1)))
    b = CrossViewPair("b", np.zeros((2, 5, 1)), np.zeros((4, 4, 1)))
    with pytest.raises(ShapeError):
        stack_pairs([a, b])
