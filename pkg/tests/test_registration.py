import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist
from scipy.spatial.transform import Rotation

from handpose.errors import DegenerateError, EmptyCloudError, HandPoseError
from handpose.geometry import (
    NNIndex,
    RigidTransform,
    apply_transform,
    axis_angle,
    compose,
    make_rng,
    rot_z,
    rotation_angle_deg,
)
from handpose.handmodel import generate_named_model
from handpose.registration import (
    CorrespondenceSet,
    IcpConfig,
    StochasticIcpConfig,
    _trial,
    closed_form_error,
    find_correspondences,
    icp,
    perturb,
    stochastic_icp,
    svd_align,
)


def direct_error(model, data, corr, T):
    """Sum of squared paired distances after applying T to the model."""
    m = apply_transform(model[corr.model_idx], T)
    return float(np.sum((data[corr.data_idx] - m) ** 2))


def paired_deviations(model, data, corr):
    m = model[corr.model_idx]
    p = data[corr.data_idx]
    return m - m.mean(axis=0), p - p.mean(axis=0)


def palm_subsample(n=500, seed=0):
    dense = generate_named_model("palm", density=60000.0, seed=seed)
    idx = np.sort(make_rng(seed).choice(dense.shape[0], n, replace=False))
    return dense[idx]


def random_transform(rng, max_deg=180.0, max_shift=1.0):
    axis = rng.normal(size=3)
    return RigidTransform(axis_angle(axis, rng.uniform(0, max_deg)), rng.uniform(-max_shift, max_shift, 3))


class TestCorrespondences:
    def test_identity(self):
        pts = make_rng(0).normal(size=(50, 3))
        c = find_correspondences(pts, NNIndex(pts))
        np.testing.assert_array_equal(c.data_idx, np.arange(50))
        assert np.all(c.distances == 0)

    def test_single_point(self):
        data = make_rng(1).normal(size=(100, 3))
        q = np.array([[0.1, 0.2, 0.3]])
        c = find_correspondences(q, NNIndex(data))
        assert len(c) == 1
        assert c.data_idx[0] == np.argmin(np.linalg.norm(data - q, axis=1))

    @pytest.mark.parametrize("seed", range(3))
    def test_brute_force(self, seed):
        rng = make_rng(seed)
        model, data = rng.normal(size=(200, 3)), rng.normal(size=(300, 3))
        c = find_correspondences(model, NNIndex(data))
        expected = []
        for m in model:
            best, bd = -1, np.inf
            for j, p in enumerate(data):
                d = np.sum((m - p) ** 2)
                if d < bd:
                    best, bd = j, d
            expected.append(best)
        np.testing.assert_array_equal(c.model_idx, np.arange(200))
        np.testing.assert_array_equal(c.data_idx, expected)
        np.testing.assert_allclose(c.distances, cdist(model, data).min(axis=1), rtol=1e-12)

    def test_ties_smallest_index(self):
        data = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
        c = find_correspondences(np.zeros((1, 3)), NNIndex(data))
        assert c.data_idx[0] == 0

    def test_empty(self):
        with pytest.raises(EmptyCloudError):
            find_correspondences(np.zeros((0, 3)), NNIndex(np.zeros((2, 3))))


class TestSvdAlign:
    def test_identity(self):
        m = make_rng(0).normal(size=(20, 3))
        a = svd_align(m, m, CorrespondenceSet.identity(20))
        np.testing.assert_allclose(a.transform.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(a.transform.t, 0, atol=1e-12)
        assert a.residual_error == pytest.approx(0, abs=1e-24)

    def test_translation(self):
        m = make_rng(1).normal(size=(20, 3))
        a = svd_align(m, m + [0.1, 0, 0], CorrespondenceSet.identity(20))
        np.testing.assert_allclose(a.transform.R, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(a.transform.t, [0.1, 0, 0], atol=1e-9)

    def test_known_transform(self):
        m = make_rng(2).normal(size=(30, 3)) * 0.1
        T = RigidTransform(rot_z(40.0), (0.02, -0.01, 0.05))
        a = svd_align(m, apply_transform(m, T), CorrespondenceSet.identity(30))
        np.testing.assert_allclose(a.transform.R, T.R, atol=1e-9)
        np.testing.assert_allclose(a.transform.t, T.t, atol=1e-9)
        assert a.residual_error <= 1e-18

    def test_singular_values_sorted(self):
        rng = make_rng(3)
        a = svd_align(rng.normal(size=(10, 3)), rng.normal(size=(10, 3)), CorrespondenceSet.identity(10))
        s = a.singular_values
        assert s[0] >= s[1] >= s[2] >= 0
        assert a.residual_error >= 0

    def test_reflection_fixed(self):
        # Data is a mirror image of the model: the unconstrained optimum is a reflection.
        m = make_rng(4).normal(size=(12, 3))
        d = m * [1, 1, -1]
        a = svd_align(m, d, CorrespondenceSet.identity(12))
        assert a.reflected
        assert np.linalg.det(a.transform.R) == pytest.approx(1.0, abs=1e-12)
        mdev, pdev = paired_deviations(m, d, CorrespondenceSet.identity(12))
        cf = closed_form_error(mdev, pdev, a.singular_values, a.reflected)
        assert cf == pytest.approx(a.residual_error, rel=1e-9)

    def test_residual_is_direct_error(self):
        rng = make_rng(5)
        m, d = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
        corr = find_correspondences(m, NNIndex(d))
        a = svd_align(m, d, corr)
        assert a.residual_error == pytest.approx(direct_error(m, d, corr, a.transform), rel=1e-12)

    def test_repeated_data_weighted_by_multiplicity(self):
        m = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        d = m + 0.5
        corr = CorrespondenceSet(np.arange(4), np.array([0, 0, 2, 3]), np.zeros(4))
        a = svd_align(m, d, corr)
        p = d[corr.data_idx]
        np.testing.assert_allclose(a.transform.apply(m.mean(axis=0)[None])[0], p.mean(axis=0), atol=1e-12)

    @pytest.mark.parametrize("n", [0, 2])
    def test_too_few(self, n):
        with pytest.raises(DegenerateError):
            svd_align(np.zeros((3, 3)), np.zeros((3, 3)), CorrespondenceSet.identity(n))

    def test_collinear_degenerate(self):
        m = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
        with pytest.raises(DegenerateError, match="degenerate configuration"):
            svd_align(m, m + 1, CorrespondenceSet.identity(5))

    def test_planar_is_fine(self):
        m = np.c_[make_rng(6).normal(size=(10, 2)), np.zeros(10)]
        T = RigidTransform(axis_angle((1, 1, 0), 30), (1, 2, 3))
        a = svd_align(m, apply_transform(m, T), CorrespondenceSet.identity(10))
        np.testing.assert_allclose(a.transform.R, T.R, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_exhaustive_search_never_beats(self, seed):
        rng = make_rng(seed)
        k = int(rng.integers(3, 9))
        m, d = rng.normal(size=(k, 3)), rng.normal(size=(k, 3))
        corr = CorrespondenceSet.identity(k)
        best = svd_align(m, d, corr).residual_error
        mc, pc = m - m.mean(axis=0), d - d.mean(axis=0)
        N = pc.T @ mc
        const = np.sum(mc ** 2) + np.sum(pc ** 2)
        g = np.radians(np.arange(0, 360, 5.0))
        b = np.radians(np.arange(0, 181, 5.0))
        E = np.stack(np.meshgrid(g, b, g, indexing="ij"), axis=-1).reshape(-1, 3)
        Rs = Rotation.from_euler("zyz", E).as_matrix()
        errs = const - 2.0 * np.einsum("kij,ij->k", Rs, N)
        start = Rotation.from_matrix(Rs[np.argmin(errs)]).as_rotvec()

        def f(v):
            return const - 2.0 * np.sum(Rotation.from_rotvec(v).as_matrix() * N)

        polished = minimize(f, start, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15}).fun
        assert min(errs.min(), polished) >= best - 1e-9


class TestClosedForm:
    def test_identical(self):
        m = make_rng(0).normal(size=(10, 3))
        m -= m.mean(axis=0)
        s = np.linalg.svd(m.T @ m, compute_uv=False)
        assert closed_form_error(m, m, s) == pytest.approx(0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32), st.integers(3, 200))
    def test_rigid_pairs(self, seed, k):
        rng = make_rng(seed)
        m = rng.normal(size=(k, 3))
        d = apply_transform(m, random_transform(rng)) + rng.normal(0, 0.01, (k, 3))
        corr = CorrespondenceSet.identity(k)
        a = svd_align(m, d, corr)
        mdev, pdev = paired_deviations(m, d, corr)
        cf = closed_form_error(mdev, pdev, a.singular_values, a.reflected)
        direct = direct_error(m, d, corr, a.transform)
        assert cf == pytest.approx(direct, rel=1e-9, abs=1e-12)

    def test_stretch(self):
        m = make_rng(1).normal(size=(30, 3))
        d = m * [2.0, 1.0, 1.0]
        corr = CorrespondenceSet.identity(30)
        a = svd_align(m, d, corr)
        mdev, pdev = paired_deviations(m, d, corr)
        assert closed_form_error(mdev, pdev, a.singular_values, a.reflected) == pytest.approx(a.residual_error,
                                                                                            rel=1e-9)

    def test_mismatched(self):
        with pytest.raises(HandPoseError):
            closed_form_error(np.zeros((3, 3)), np.zeros((4, 3)), np.zeros(3))
        with pytest.raises(HandPoseError):
            closed_form_error(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(2))


class TestIcp:
    def test_identical(self):
        m = palm_subsample()
        r = icp(m, m)
        assert r.iterations == 1 and r.converged
        assert r.rmse <= 1e-12
        np.testing.assert_allclose(r.transform.R, np.eye(3), atol=1e-12)

    def test_ten_degrees(self):
        m = palm_subsample()
        c = m.mean(axis=0)
        T = RigidTransform(rot_z(10.0), c - rot_z(10.0) @ c)
        r = icp(m, apply_transform(m, T), IcpConfig(100, 1e-12))
        assert rotation_angle_deg(r.transform.R @ T.R.T) <= 0.5
        assert r.rmse <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_and_bounded(self, seed):
        rng = make_rng(seed)
        m = palm_subsample(300, seed)
        d = apply_transform(m, random_transform(rng, 40, 0.03)) + rng.normal(0, 0.002, m.shape)
        r = icp(m, d, IcpConfig(25, 1e-9))
        h = r.mse_history
        assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))
        assert r.iterations <= 25
        assert len(h) == r.iterations + 1

    def test_aligned_matches_transform(self):
        rng = make_rng(7)
        m = palm_subsample(300)
        d = apply_transform(m, random_transform(rng, 30, 0.05))
        r = icp(m, d)
        np.testing.assert_allclose(r.aligned, apply_transform(m, r.transform), atol=1e-9)
        assert np.linalg.det(r.transform.R) == pytest.approx(1.0, abs=1e-12)

    def test_equivariance(self):
        rng = make_rng(8)
        m = palm_subsample(300)
        d = apply_transform(m, random_transform(rng, 20, 0.02)) + rng.normal(0, 0.001, m.shape)
        T = random_transform(rng, 180, 2.0)
        X = icp(m, d, IcpConfig(20, 1e-9)).transform
        Y = icp(apply_transform(m, T), apply_transform(d, T), IcpConfig(20, 1e-9)).transform
        expected = compose(T, compose(X, T.inverse()))
        np.testing.assert_allclose(Y.R, expected.R, atol=1e-6)
        np.testing.assert_allclose(Y.t, expected.t, atol=1e-6)

    def test_degenerate_flagged(self):
        # A collinear model degenerates on the first alignment.
        m = np.c_[np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)]
        r = icp(m, m + [0, 0.1, 0])
        assert r.degenerate and r.iterations == 0
        np.testing.assert_array_equal(r.aligned, m)

    @pytest.mark.parametrize("kw", [{"max_iter": 0}, {"err": 0}])
    def test_invalid_config(self, kw):
        with pytest.raises(HandPoseError):
            IcpConfig(**kw)

    def test_empty(self):
        with pytest.raises(EmptyCloudError):
            icp(np.zeros((0, 3)), np.zeros((3, 3)))


class TestPerturb:
    def test_identity_hook(self):
        m = make_rng(0).normal(size=(10, 3))
        out, R, s = perturb(m, 0.0, 1, rotate=False)
        np.testing.assert_array_equal(out, m)
        np.testing.assert_array_equal(R, np.eye(3))

    def test_rigid(self):
        m = make_rng(1).normal(size=(50, 3))
        out, R, s = perturb(m, 0.1, 2)
        np.testing.assert_allclose(pdist(out), pdist(m), atol=1e-9)
        np.testing.assert_allclose(out, m @ R.T + s, atol=1e-15)

    def test_moments(self):
        sigma = 0.1
        rng = make_rng(3)
        s = np.array([perturb(np.zeros((1, 3)), sigma, rng, rotate=False)[2] for _ in range(10000)])
        assert np.all(np.abs(s.mean(axis=0)) <= 5 * sigma / 100)
        np.testing.assert_allclose(s.var(axis=0), sigma ** 2, rtol=0.1)

    def test_per_point(self):
        m = np.zeros((5, 3))
        _, _, s = perturb(m, 0.1, 4, per_point=True)
        assert s.shape == (5, 3)

    def test_negative_sigma(self):
        with pytest.raises(HandPoseError):
            perturb(np.zeros((1, 3)), -1.0, 0)


class TestStochastic:
    def test_identity_hook(self):
        m = palm_subsample(200)
        r = stochastic_icp(m, m, StochasticIcpConfig(n=1, sigma=0.0, rotate=False))
        np.testing.assert_allclose(r.transform.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(r.transform.t, 0, atol=1e-12)
        assert r.rmse == pytest.approx(0, abs=1e-12)

    def test_transform_maps_original_model(self):
        rng = make_rng(1)
        m = palm_subsample(200)
        d = apply_transform(m, random_transform(rng, 90, 0.05))
        r = stochastic_icp(m, d, StochasticIcpConfig(n=5, seed=3))
        np.testing.assert_allclose(r.aligned, apply_transform(m, r.transform), atol=1e-9)
        assert r.best_trial == int(np.argmin(r.trial_rmse))

    def test_deterministic(self):
        rng = make_rng(2)
        m = palm_subsample(200)
        d = apply_transform(m, random_transform(rng, 90, 0.05))
        cfg = StochasticIcpConfig(n=6, seed=11)
        a, b = stochastic_icp(m, d, cfg), stochastic_icp(m, d, cfg)
        np.testing.assert_array_equal(a.transform.matrix(), b.transform.matrix())
        np.testing.assert_array_equal(a.trial_rmse, b.trial_rmse)

    def test_trials_independent_of_order(self):
        rng = make_rng(3)
        m = palm_subsample(200)
        d = apply_transform(m, random_transform(rng, 90, 0.05))
        cfg = StochasticIcpConfig(n=4, seed=5)
        index = NNIndex(d)
        args = (m, m.mean(axis=0), d.mean(axis=0), d, index, cfg)
        forward = [_trial(*args, i)[1].matrix() for i in range(4)]
        backward = [_trial(*args, i)[1].matrix() for i in reversed(range(4))][::-1]
        for f, b in zip(forward, backward):
            np.testing.assert_array_equal(f, b)
        # Trial i is the same whatever the trial count.
        short = stochastic_icp(m, d, cfg).trial_rmse
        long = stochastic_icp(m, d, StochasticIcpConfig(n=8, seed=5)).trial_rmse
        np.testing.assert_array_equal(short, long[:4])

    def test_per_point_mode_runs(self):
        m = palm_subsample(200)
        r = stochastic_icp(m, m, StochasticIcpConfig(n=3, sigma=0.01, per_point_noise=True, seed=1))
        assert np.linalg.det(r.transform.R) == pytest.approx(1.0, abs=1e-12)
        assert r.rmse < 0.01

    def test_all_degenerate(self):
        m = np.c_[np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)]
        with pytest.raises(DegenerateError, match="all stochastic"):
            stochastic_icp(m, m, StochasticIcpConfig(n=3))

    @pytest.mark.parametrize("kw", [{"n": 0}, {"sigma": -0.1}, {"inner_max_it": 0}, {"final_max_iter": 0},
                                    {"err": 0.0}])
    def test_invalid_config(self, kw):
        with pytest.raises(HandPoseError):
            StochasticIcpConfig(**kw)
