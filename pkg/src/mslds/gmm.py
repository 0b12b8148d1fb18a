"""Preliminary Gaussian-mixture fit and switching-model initialization.

The per-state envelopes N(mu_s, sigma_s) are estimated up front by a
full-covariance Gaussian mixture fit over the pooled frames; the switching
model then starts from those envelopes with deliberately conservative
dynamics (A = 0, Q = sigma/2) that sit strictly inside the stability region,
so the first constrained M-step begins from a feasible incumbent.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .estep import gaussian_loglik
from .linalg import chol_lower, eigen_floor, symmetrize
from .model import (
    DEFAULT_SIGMA_FLOOR_REL,
    ModelParams,
    StateDynamics,
    StateGaussian,
    rel_floor,
)

log = logging.getLogger(__name__)

_RESP_ROW_TOL = 1e-10


@dataclass(frozen=True)
class GmmConfig:
    """Stopping rule, covariance floor, and initialization stickiness."""

    tol: float = 1e-6  # relative log-likelihood improvement threshold
    max_iters: int = 200
    sigma_floor_rel: float = DEFAULT_SIGMA_FLOOR_REL
    p_stay: float = 0.95  # self-transition mass of the initial chain


@dataclass(frozen=True)
class GmmFit:
    """Mixture weights, envelopes, responsibilities, and final evidence."""

    weights: np.ndarray  # (K,)
    gaussians: tuple[StateGaussian, ...]
    responsibilities: np.ndarray  # (T, K)
    loglik: float

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        resp = np.asarray(self.responsibilities, dtype=np.float64)
        k = weights.shape[0]
        if len(self.gaussians) != k:
            raise ValueError("need one gaussian per mixture weight")
        if abs(float(weights.sum()) - 1.0) > _RESP_ROW_TOL * k:
            raise ValueError("mixture weights must sum to one")
        if resp.ndim != 2 or resp.shape[1] != k:
            raise ValueError(f"responsibilities must be T x {k}")
        if np.max(np.abs(resp.sum(axis=1) - 1.0), initial=0.0) > _RESP_ROW_TOL:
            raise ValueError("responsibility rows must sum to one")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "responsibilities", resp)
        object.__setattr__(self, "gaussians", tuple(self.gaussians))

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]


def kmeanspp_seed(data: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Distance-squared-proportional centroid seeding; deterministic in seed."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DataError("data must be a T x d matrix")
    t_frames = data.shape[0]
    if k < 1:
        raise DataError("k must be positive")
    if t_frames < k:
        raise DataError(f"need at least {k} frames, got {t_frames}")
    if np.unique(data, axis=0).shape[0] < k:
        raise DataError(f"fewer than {k} distinct frames")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(t_frames)]
    dist2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(dist2.sum())
        if total <= 0.0:
            raise DataError(f"fewer than {k} distinct frames")
        cum = np.cumsum(dist2 / total)
        idx = int(np.searchsorted(cum, rng.random(), side="right"))
        centroids[j] = data[min(idx, t_frames - 1)]
        dist2 = np.minimum(dist2, np.sum((data - centroids[j]) ** 2, axis=1))
    return centroids


def _floored_cov(
    sq_sum: np.ndarray, mean: np.ndarray, weight: float, floor_rel: float
) -> np.ndarray:
    cov = symmetrize(sq_sum / weight - np.outer(mean, mean))
    # The 1% headroom keeps the result acceptable to the envelope validator,
    # which recomputes a trace-relative floor on the clamped matrix (whose
    # trace the clamping itself inflated).
    return eigen_floor(cov, 1.01 * rel_floor(cov, floor_rel))


def _mixture_logliks(
    data: np.ndarray,
    weights: np.ndarray,
    mus: np.ndarray,
    sigmas: np.ndarray,
) -> np.ndarray:
    """(T, K) matrix of log(w_s) + log N(x_t; mu_s, sigma_s)."""
    out = np.empty((data.shape[0], weights.shape[0]))
    for s in range(weights.shape[0]):
        out[:, s] = np.log(weights[s]) + gaussian_loglik(
            data, mus[s], chol_lower(sigmas[s])
        )
    return out


def _posteriors(joint: np.ndarray) -> tuple[np.ndarray, float]:
    norm = np.logaddexp.reduce(joint, axis=1)
    resp = np.exp(joint - norm[:, None])
    return resp, float(norm.sum())


def gmm_em(
    data: np.ndarray,
    k: int,
    seed: int,
    cfg: GmmConfig | None = None,
) -> GmmFit:
    """Full-covariance mixture EM from a kmeans++ seed.

    Covariances are eigenvalue-floored every iteration; an emptied component
    is re-seeded on the lowest-likelihood frame. Stops on a relative evidence
    improvement below cfg.tol or after cfg.max_iters sweeps.
    """
    if cfg is None:
        cfg = GmmConfig()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DataError("data must be a T x d matrix")
    if not np.all(np.isfinite(data)):
        raise DataError("data contains non-finite values")
    t_frames, d = data.shape
    if t_frames < k * (d + 1):
        warnings.warn(
            f"only {t_frames} frames for {k} components in dimension {d}; "
            "the fit may be degenerate",
            stacklevel=2,
        )

    mus = kmeanspp_seed(data, k, seed)
    pooled_mean = data.mean(axis=0)
    pooled = _floored_cov(
        data.T @ data, pooled_mean, float(t_frames), cfg.sigma_floor_rel
    )
    sigmas = np.repeat(pooled[None, :, :], k, axis=0)
    weights = np.full(k, 1.0 / k)

    loglik_prev = -np.inf
    for _ in range(cfg.max_iters):
        joint = _mixture_logliks(data, weights, mus, sigmas)
        resp, loglik = _posteriors(joint)

        mass = resp.sum(axis=0)
        empty = np.flatnonzero(mass < 1e-10 * t_frames)
        if empty.size:
            worst = np.argsort(np.logaddexp.reduce(joint, axis=1))
            for rank, s in enumerate(empty):
                row = int(worst[rank % t_frames])
                log.warning(
                    "component %d emptied; re-seeding on frame %d", s, row
                )
                resp[row] = 0.0
                resp[row, s] = 1.0
            mass = resp.sum(axis=0)

        weights = mass / t_frames
        mus = (resp.T @ data) / mass[:, None]
        for s in range(k):
            sq = (resp[:, s : s + 1] * data).T @ data
            sigmas[s] = _floored_cov(sq, mus[s], float(mass[s]), cfg.sigma_floor_rel)

        if loglik - loglik_prev < cfg.tol * max(1.0, abs(loglik_prev)):
            break
        loglik_prev = loglik

    # Final inference pass so the returned responsibilities and evidence
    # belong to the returned parameters.
    joint = _mixture_logliks(data, weights, mus, sigmas)
    resp, loglik = _posteriors(joint)
    gaussians = tuple(StateGaussian(mu=mus[s], sigma=sigmas[s]) for s in range(k))
    return GmmFit(
        weights=weights, gaussians=gaussians, responsibilities=resp, loglik=loglik
    )


def init_model(fit: GmmFit, cfg: GmmConfig | None = None) -> ModelParams:
    """Switching-model start: mixture envelopes, sticky chain, inert dynamics.

    A = 0 with Q = sigma/2 satisfies Q + A sigma A^T <= sigma with slack, so
    every state of the returned model passes the stability check by
    construction.
    """
    if cfg is None:
        cfg = GmmConfig()
    k = fit.n_components
    d = fit.gaussians[0].dim
    if k == 1:
        trans = np.ones((1, 1))
    else:
        off = (1.0 - cfg.p_stay) / (k - 1)
        trans = np.full((k, k), off)
        np.fill_diagonal(trans, cfg.p_stay)
    dynamics = tuple(
        StateDynamics(
            a=np.zeros((d, d)), b=np.array(g.mu), q=0.5 * np.array(g.sigma)
        )
        for g in fit.gaussians
    )
    weights = fit.weights / float(fit.weights.sum())
    return ModelParams(
        n_states=k,
        dim=d,
        trans=trans,
        pi=weights,
        dynamics=dynamics,
        gaussians=fit.gaussians,
    )
