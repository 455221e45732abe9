import numpy as np
import pytest

from cvgeo import explain as X
from cvgeo import model as M
from cvgeo.data import CrossViewPair, disk_mask, read_feature_map
from cvgeo.errors import DegenerateMapError, ShapeError, TraceError
from gradcheck import central_diff, max_rel_error


def setup(gen, C=3, C1=5, K=4):
    p = M.init_params(C, C1, K, int(gen.integers(1 << 30)))
    for name in ("b1_street", "b1_aerial", "b2"):
        getattr(p, name)[...] = gen.normal(0, 0.3, getattr(p, name).shape)
    return p, gen.normal(size=(2, 6, C)), gen.normal(size=(6, 6, C))


class TestMatchingScore:
    def test_is_pre_norm_inner_product(self, gen):
        p, s, a = setup(gen)
        score, (ts, ta) = X.matching_score(p, s, a)
        assert score == pytest.approx(float(ts.pre_norm @ ta.pre_norm))
        assert ts.view == "street" and ta.view == "aerial"

    def test_identical_pre_norm(self):
        C = 2
        I, z = np.eye(C), np.zeros(C)
        p = M.ModelParams(I.copy(), z.copy(), I.copy(), z.copy(), I.copy(), z.copy())
        v = np.array([3.0, 4.0])
        t = np.broadcast_to(v, (2, 2, C))
        assert X.matching_score(p, t, t)[0] == pytest.approx(25.0)
        w = np.broadcast_to(np.array([0.0, 4.0]), (2, 2, C))
        u = np.broadcast_to(np.array([3.0, 0.0]), (2, 2, C))
        assert X.matching_score(p, u, w)[0] == 0.0

    def test_gradient_is_other_pre_norm(self, gen):
        p, s, a = setup(gen)
        _, (ts, ta) = X.matching_score(p, s, a)
        x = ts.pre_norm.copy()
        num = central_diff(lambda: float(x @ ta.pre_norm), x, 1e-6)
        np.testing.assert_allclose(num, ta.pre_norm, rtol=1e-6)

    def test_rejects_batch(self, gen):
        p, s, a = setup(gen)
        with pytest.raises(ShapeError):
            X.matching_score(p, s[None], a[None])


class TestGradCam:
    def test_hand_example(self):
        A = np.maximum(np.array([[1.0, -1.0], [2.0, 0.0]]), 0)[..., None]
        cam, alpha = X.grad_cam_core(A, np.array([4.0]))
        assert alpha.tolist() == [1.0]
        assert cam.tolist() == [[1.0, 0.0], [2.0, 0.0]]

    def test_hand_example_via_score(self):
        # C = C1 = K = 1, identity stem; other pre_norm 2 and W2 = 2 give pooled-gradient 4
        one, z = np.ones((1, 1)), np.zeros(1)
        p = M.ModelParams(one.copy(), z.copy(), one.copy(), z.copy(), 2 * one, z.copy())
        street = np.array([[1.0, -1.0], [2.0, 0.0]])[..., None]
        aerial = np.full((2, 2, 1), 1.0)
        _, traces = X.matching_score(p, street, aerial)
        target, alpha = X.channel_weights(p, traces, "street")
        assert alpha.tolist() == [1.0]
        amap = X.grad_cam(p, traces, "street")
        assert amap.values.tolist() == [[1.0, 0.0], [2.0, 0.0]]

    def test_channel_weights_finite_difference(self, gen):
        p, s, a = setup(gen)
        _, (ts, ta) = X.matching_score(p, s, a)
        for view, target, other in (("street", ts, ta), ("aerial", ta, ts)):
            _, alpha = X.channel_weights(p, (ts, ta), view)
            A = target.stage1_post.copy()

            def score():
                return float(M.head(p, A.mean(axis=(0, 1)))[0] @ other.pre_norm)

            num = central_diff(score, A, 1e-5).mean(axis=(0, 1))
            assert max_rel_error(alpha, num) < 1e-4

    def test_zero_other_pre_norm_gives_zero_map(self, gen):
        # forward refuses an exactly-zero pre_norm, so apply the chain rule directly
        p, s, a = setup(gen)
        _, (ts, _) = X.matching_score(p, s, a)
        cam, alpha = X.grad_cam_core(ts.stage1_post, p.W2.T @ np.zeros(p.W2.shape[0]))
        assert not alpha.any() and not cam.any()

    def test_query_dependence(self):
        C = 2
        I, z = np.eye(C), np.zeros(C)
        p = M.ModelParams(I.copy(), z.copy(), I.copy(), z.copy(), I.copy(), z.copy())
        street = np.zeros((1, 2, C))
        street[0, 0] = [1.0, 0.0]
        street[0, 1] = [0.0, 1.0]
        a1 = np.broadcast_to(np.array([1.0, 0.1]), (2, 2, C))
        a2 = np.broadcast_to(np.array([0.1, 1.0]), (2, 2, C))
        m1 = X.grad_cam(p, X.matching_score(p, street, a1)[1], "street").values
        m2 = X.grad_cam(p, X.matching_score(p, street, a2)[1], "street").values
        assert np.abs(m1 - m2).max() > 0
        assert m1.argmax() == 0 and m2.argmax() == 1

    def test_aerial_map_masked(self, gen):
        p, s, _ = setup(gen)
        a = np.abs(gen.normal(size=(8, 8, 3)))
        amap = X.grad_cam(p, X.matching_score(p, s, a)[1], "aerial")
        assert not amap.values[~disk_mask(8)].any()
        assert amap.values.shape == (8, 8) and np.all(amap.values >= 0)

    def test_stale_trace(self, gen):
        p, s, a = setup(gen)
        _, traces = X.matching_score(p, s, a)
        p.W2 += 0.1
        with pytest.raises(TraceError):
            X.grad_cam(p, traces, "street")

    def test_mismatched_trace(self, gen):
        p, s, a = setup(gen)
        _, traces = X.matching_score(p, s, a)
        with pytest.raises(TraceError):
            X.grad_cam(M.init_params(3, 6, 4, 0), traces, "street")

    def test_swapped_traces(self, gen):
        p, s, a = setup(gen)
        _, (ts, ta) = X.matching_score(p, s, a)
        with pytest.raises(TraceError):
            X.grad_cam(p, (ta, ts), "street")


class TestThreshold:
    def test_tau_zero_takes_positive(self):
        v = np.array([[0.0, 1.0], [2.0, 0.0]])
        ps = X.threshold_pixels(X.ActivationMap("street", v), 0.0)
        assert sorted(zip(ps.rows, ps.cols)) == [(0, 1), (1, 0)]

    def test_tau_one_empty(self, gen):
        ps = X.threshold_pixels(X.ActivationMap("street", np.abs(gen.normal(size=(4, 5)))), 1.0)
        assert len(ps) == 0

    def test_single_peak_superlevel(self):
        yy, xx = np.mgrid[:15, :15]
        v = np.exp(-((yy - 6) ** 2 + (xx - 9) ** 2) / 8.0)
        ps = X.threshold_pixels(X.ActivationMap("aerial", v), 0.5)
        norm = v / v.max()
        want = {(i, j) for i in range(15) for j in range(15) if norm[i, j] > 0.5}
        assert set(zip(ps.rows.tolist(), ps.cols.tolist())) == want
        np.testing.assert_allclose(ps.weights, norm[ps.rows, ps.cols])

    def test_zero_map(self):
        with pytest.raises(DegenerateMapError):
            X.threshold_pixels(X.ActivationMap("street", np.zeros((3, 3))), 0.5)

    @pytest.mark.parametrize("tau", [-0.1, 1.5])
    def test_bad_tau(self, tau):
        with pytest.raises(ValueError):
            X.threshold_pixels(np.ones((2, 2)), tau)

    def test_map_validation(self):
        with pytest.raises(ValueError):
            X.ActivationMap("street", -np.ones((2, 2)))
        with pytest.raises(ShapeError):
            X.ActivationMap("street", np.ones(3))


class TestExport:
    def test_pgm(self, tmp_path):
        v = np.array([[0.0, 1.0, 2.0]])
        X.write_pgm(tmp_path / "m.pgm", X.ActivationMap("street", v))
        raw = (tmp_path / "m.pgm").read_bytes()
        assert raw == b"P5\n3 1\n255\n" + bytes([0, 128, 255])

    def test_cvfm(self, tmp_path, gen):
        v = np.abs(gen.normal(size=(4, 6))).astype(np.float32).astype(np.float64)
        X.write_map_cvfm(tmp_path / "m.cvfm", X.ActivationMap("street", v))
        back = read_feature_map(tmp_path / "m.cvfm")
        assert back.shape == (4, 6, 1) and np.array_equal(back[..., 0], v)


class TestRotationEquivariance:
    def test_identity_rotation_is_perfect(self, gen):
        p, s, a = setup(gen)
        pair = CrossViewPair("x", s, np.abs(a) * disk_mask(6)[..., None], 0.0)
        assert X.rotation_equivariance(p, [pair], phis=(0,)) == pytest.approx(1.0)

    @pytest.mark.slow
    def test_rotate_trained_beats_aligned_trained(self):
        # same models as the alignment grid; averaged over three seeds
        from cvgeo import experiments as E
        from cvgeo.trainer import train

        scfg = E.synthetic()
        score = {"aligned": [], "random_rotate": []}
        for seed in (0, 1, 2):
            tr, va = E.split(scfg, 1000, 20, seed)
            for regime in score:
                params, _ = train(tr, E.training(E.ALIGNMENT_TRAINING, alignment_regime=regime, seed=seed))
                score[regime].append(X.rotation_equivariance(params, va))
        assert np.mean(score["random_rotate"]) > np.mean(score["aligned"]), score
