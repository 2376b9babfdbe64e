"""Point-to-point ICP with closed-form SVD alignment, and its stochastic multi-start variant.

Conventions: the *model* cloud is moved onto the fixed *data* cloud. Every
returned transform maps the input model coordinates to the aligned model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from handpose.errors import DegenerateError, HandPoseError
from handpose.geometry import (
    NNIndex,
    RigidTransform,
    apply_transform,
    as_cloud,
    child_seed,
    compose,
    make_rng,
    random_rotation,
    rms_nearest,
)

log = logging.getLogger(__name__)

RANK_TOL = 1e-12
ERR_FLOOR = 1e-30


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Pairs ``(model_idx[k], data_idx[k])``; each model index appears once."""

    model_idx: np.ndarray
    data_idx: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return self.model_idx.shape[0]

    @classmethod
    def identity(cls, n: int) -> "CorrespondenceSet":
        idx = np.arange(n)
        return cls(idx, idx.copy(), np.zeros(n))

    def mean_squared_error(self) -> float:
        return float(np.mean(self.distances ** 2))


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    transform: RigidTransform
    residual_error: float  # sum of squared pair distances after alignment (m^2)
    singular_values: np.ndarray
    reflected: bool  # det(U V^T) was -1 and the Kabsch sign fix was applied


@dataclass(frozen=True)
class IcpConfig:
    max_iter: int = 30
    err: float = 1e-5

    def __post_init__(self):
        if self.max_iter < 1:
            raise HandPoseError("max_iter must be >= 1")
        if not self.err > 0:
            raise HandPoseError("err must be positive")


@dataclass(frozen=True)
class StochasticIcpConfig:
    """Multi-start ICP parameters.

    ``rotate=False`` disables the random rotation (a test hook);
    ``per_point_noise`` draws an independent offset for every model point
    instead of one shared offset per trial.
    """

    n: int = 50
    sigma: float = 0.1
    inner_max_it: int = 10
    final_max_iter: int = 30
    err: float = 1e-5
    seed: int = 0
    rotate: bool = True
    per_point_noise: bool = False
    align_centroids: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise HandPoseError("trial count n must be >= 1")
        if not self.sigma >= 0:
            raise HandPoseError("sigma must be >= 0")
        if self.inner_max_it < 1 or self.final_max_iter < 1:
            raise HandPoseError("iteration limits must be >= 1")
        if not self.err > 0:
            raise HandPoseError("err must be positive")


@dataclass(frozen=True, eq=False)
class IcpResult:
    aligned: np.ndarray
    transform: RigidTransform
    rmse: float
    iterations: int
    mse_history: list = field(default_factory=list)
    converged: bool = False
    degenerate: bool = False


def find_correspondences(model, data_index: NNIndex) -> CorrespondenceSet:
    """Nearest data point for every model point (ties -> smallest data index)."""
    M = as_cloud(model, allow_empty=False)
    idx, dist = data_index.query(M)
    return CorrespondenceSet(np.arange(M.shape[0]), idx, dist)


def svd_align(model, data, corr: CorrespondenceSet) -> AlignmentResult:
    """Least-squares rigid transform taking matched model points onto data points.

    Centroids and the cross-covariance are taken over the matched pairs, so a
    data point matched twice counts twice.

    Raises:
        DegenerateError: fewer than 3 pairs, or cross-covariance rank below 2.
    """
    M = as_cloud(model)
    P = as_cloud(data)
    if len(corr) < 3:
        raise DegenerateError(f"need at least 3 correspondences, got {len(corr)}")
    m = M[corr.model_idx]
    p = P[corr.data_idx]
    mu_m = m.mean(axis=0)
    mu_p = p.mean(axis=0)
    mc = m - mu_m
    pc = p - mu_p
    N = pc.T @ mc
    U, S, Vt = np.linalg.svd(N)
    if S[0] == 0.0 or S[1] <= RANK_TOL * S[0]:
        raise DegenerateError("degenerate configuration: cross-covariance rank < 2")
    D = np.eye(3)
    reflected = np.linalg.det(U @ Vt) < 0
    if reflected:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    t = mu_p - R @ mu_m
    resid = p - (m @ R.T + t)
    return AlignmentResult(RigidTransform(R, t), float(np.einsum("ij,ij->", resid, resid)), S, bool(reflected))


def closed_form_error(model_dev, data_dev, singular_values, reflected: bool = False) -> float:
    """Minimum of the paired squared error from the SVD of the cross-covariance.

    ``sum(|p'|^2 + |m'|^2) - 2 (s1 + s2 + s3)`` for deviations from the paired
    centroids. When the sign fix was needed the smallest singular value enters
    with a minus sign, matching the proper rotation actually returned.
    """
    m = np.asarray(model_dev, dtype=float)
    p = np.asarray(data_dev, dtype=float)
    if m.shape != p.shape or m.ndim != 2 or m.shape[1] != 3:
        raise HandPoseError("deviation arrays must have matching (K, 3) shapes")
    s = np.asarray(singular_values, dtype=float)
    if s.shape != (3,):
        raise HandPoseError("expected three singular values")
    trace = s[0] + s[1] + (-s[2] if reflected else s[2])
    return float(np.einsum("ij,ij->", p, p) + np.einsum("ij,ij->", m, m) - 2.0 * trace)


def _relative_change(prev, cur):
    return abs(prev - cur) / max(prev, ERR_FLOOR)


def icp(model, data, cfg: IcpConfig = IcpConfig(), data_index: NNIndex | None = None) -> IcpResult:
    """Standard point-to-point ICP.

    Each iteration matches every model point to its nearest data point, solves
    the closed-form alignment and applies it. Stops when the relative change of
    the mean squared correspondence error drops below ``cfg.err`` or after
    ``cfg.max_iter`` iterations. A degenerate alignment ends the run and the
    last good state is returned with ``degenerate=True``.
    """
    M0 = as_cloud(model, allow_empty=False)
    P = as_cloud(data, allow_empty=False)
    index = data_index if data_index is not None else NNIndex(P)

    current = M0
    total = RigidTransform.identity()
    corr = find_correspondences(current, index)
    history = [corr.mean_squared_error()]
    iterations = 0
    converged = degenerate = False
    while iterations < cfg.max_iter:
        try:
            step = svd_align(current, P, corr).transform
        except DegenerateError as exc:
            log.debug("icp stopped: %s", exc)
            degenerate = True
            break
        current = apply_transform(current, step)
        total = compose(step, total)
        iterations += 1
        corr = find_correspondences(current, index)
        history.append(corr.mean_squared_error())
        # An error at the floor is an exact fit; relative changes of round-off are meaningless.
        if history[-1] <= ERR_FLOOR or _relative_change(history[-2], history[-1]) < cfg.err:
            converged = True
            break
    # Recompute from the input so aligned == total.apply(model) exactly.
    aligned = as_cloud(apply_transform(M0, total))
    return IcpResult(aligned, total, float(np.sqrt(history[-1])), iterations, history, converged, degenerate)


def perturb(model, sigma: float, rng, rotate: bool = True, per_point: bool = False):
    """Random rigid perturbation ``m' = R_rand m + s`` about the origin.

    Returns ``(perturbed, R_rand, s)``; ``s`` is ``(3,)`` or ``(N, 3)`` with
    ``per_point``.
    """
    if not sigma >= 0:
        raise HandPoseError("sigma must be >= 0")
    rng = make_rng(rng)
    M = as_cloud(model)
    R = random_rotation(rng) if rotate else np.eye(3)
    shape = M.shape if per_point else (3,)
    s = rng.normal(0.0, sigma, shape) if sigma > 0 else np.zeros(shape)
    return M @ R.T + s, R, s


@dataclass(frozen=True, eq=False)
class StochasticResult:
    aligned: np.ndarray
    transform: RigidTransform
    rmse: float
    best_trial: int
    trial_rmse: np.ndarray


def _trial(M0, mu_m, anchor, P, index, cfg, i):
    rng = make_rng(child_seed(cfg.seed, i))
    centred = M0 - mu_m
    perturbed, R_rand, s = perturb(centred, cfg.sigma, rng, cfg.rotate, cfg.per_point_noise)
    start = perturbed + anchor
    if cfg.per_point_noise:
        # The start cloud is not rigidly related to the model; fit the rigid part.
        init = svd_align(M0, start, CorrespondenceSet.identity(M0.shape[0])).transform
    else:
        init = RigidTransform(R_rand, anchor + s - R_rand @ mu_m)
    res = icp(start, P, IcpConfig(cfg.inner_max_it, cfg.err), index)
    return res, compose(res.transform, init)


def stochastic_icp(model, data, cfg: StochasticIcpConfig = StochasticIcpConfig(),
                   data_index: NNIndex | None = None) -> StochasticResult:
    """Multi-start ICP.

    Trial ``i`` rotates the model about its centroid by a uniform random
    rotation, offsets it by a Gaussian draw ``s`` (std ``sigma`` per axis) and
    runs ``inner_max_it`` ICP iterations. With ``align_centroids`` the model is
    first moved so its centroid sits on the data centroid. The trial closest to
    the data (RMS nearest distance) is refined with ``final_max_iter``
    iterations. Trial ``i`` draws from a stream derived from ``(seed, i)``.

    Raises:
        DegenerateError: every trial degenerated.
    """
    M0 = as_cloud(model, allow_empty=False)
    P = as_cloud(data, allow_empty=False)
    index = data_index if data_index is not None else NNIndex(P)
    mu_m = M0.mean(axis=0)
    anchor = P.mean(axis=0) if cfg.align_centroids else mu_m

    best = None
    scores = np.full(cfg.n, np.inf)
    for i in range(cfg.n):
        try:
            res, T = _trial(M0, mu_m, anchor, P, index, cfg, i)
        except DegenerateError:
            continue
        if res.degenerate and res.iterations == 0:
            continue
        aligned = apply_transform(M0, T)
        scores[i] = rms_nearest(aligned, P, index)
        if best is None or scores[i] < scores[best[0]]:
            best = (i, T, aligned)
    if best is None:
        raise DegenerateError("all stochastic ICP trials degenerated")
    i_best, T_best, start = best
    final = icp(start, P, IcpConfig(cfg.final_max_iter, cfg.err), index)
    T = compose(final.transform, T_best)
    aligned = as_cloud(apply_transform(M0, T))
    return StochasticResult(aligned, T, rms_nearest(aligned, P, index), i_best, scores)
