"""Posterior inference over the hidden state chain (the E-step).

Messages are computed in the log domain with per-step normalizers, so
likelihoods of long trajectories never underflow. The first frame of each
trajectory is conditioning context: state dynamics score transitions between
consecutive frames, so by default frame 0 contributes no emission term and the
state posterior there comes from the prior and the smoothing messages alone.
Passing ``score_first_frame=True`` additionally scores frame 0 under each
state's Gaussian envelope.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .linalg import chol_logdet, chol_lower, chol_solve, logsumexp
from .model import ModelParams, Trajectory

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class RawStats:
    """Posterior-weighted sufficient statistics, per state.

    Pair statistics run over consecutive frame pairs (x_prev, x_cur) weighted
    by the posterior of the state governing the step into x_cur:

      w        (K,)      total pair weight
      sx_cur   (K, d)    sum of gamma * x_cur
      sx_prev  (K, d)    sum of gamma * x_prev
      sxx_cur  (K, d, d) sum of gamma * x_cur x_cur^T
      sxx_prev (K, d, d) sum of gamma * x_prev x_prev^T
      sxx_lag  (K, d, d) sum of gamma * x_cur x_prev^T

    Frame statistics (fw, fx, fxx) run over every frame with its own posterior
    weight; they support re-estimating state envelopes.
    """

    w: np.ndarray
    sx_cur: np.ndarray
    sx_prev: np.ndarray
    sxx_cur: np.ndarray
    sxx_prev: np.ndarray
    sxx_lag: np.ndarray
    fw: np.ndarray
    fx: np.ndarray
    fxx: np.ndarray

    def __add__(self, other: "RawStats") -> "RawStats":
        return RawStats(
            w=self.w + other.w,
            sx_cur=self.sx_cur + other.sx_cur,
            sx_prev=self.sx_prev + other.sx_prev,
            sxx_cur=self.sxx_cur + other.sxx_cur,
            sxx_prev=self.sxx_prev + other.sxx_prev,
            sxx_lag=self.sxx_lag + other.sxx_lag,
            fw=self.fw + other.fw,
            fx=self.fx + other.fx,
            fxx=self.fxx + other.fxx,
        )

    @staticmethod
    def zeros(n_states: int, dim: int) -> "RawStats":
        k, d = n_states, dim
        return RawStats(
            w=np.zeros(k),
            sx_cur=np.zeros((k, d)),
            sx_prev=np.zeros((k, d)),
            sxx_cur=np.zeros((k, d, d)),
            sxx_prev=np.zeros((k, d, d)),
            sxx_lag=np.zeros((k, d, d)),
            fw=np.zeros(k),
            fx=np.zeros((k, d)),
            fxx=np.zeros((k, d, d)),
        )


@dataclass(frozen=True)
class EStepResult:
    """Aggregated posteriors over a batch of trajectories.

    gamma and xi are concatenated across trajectories in input order; lengths
    records each trajectory's frame count so per-trajectory blocks can be
    recovered (trajectory i contributes lengths[i] gamma rows and
    lengths[i] - 1 xi slices).
    """

    gamma: np.ndarray  # (sum T_i, K)
    xi: np.ndarray  # (sum (T_i - 1), K, K)
    loglik: float
    stats: RawStats
    lengths: tuple[int, ...]

    def gamma_blocks(self):
        start = 0
        for n in self.lengths:
            yield self.gamma[start : start + n]
            start += n

    def xi_blocks(self):
        start = 0
        for n in self.lengths:
            yield self.xi[start : start + n - 1]
            start += n - 1


def gaussian_loglik(x: np.ndarray, mean: np.ndarray, cov_chol: np.ndarray) -> np.ndarray:
    """Row-wise log N(x; mean, cov) given the lower Cholesky factor of cov."""
    x = np.atleast_2d(x)
    resid = x - mean
    solved = chol_solve(cov_chol, resid.T).T
    d = x.shape[1]
    quad = np.einsum("ti,ti->t", resid, solved)
    return -0.5 * (d * _LOG_2PI + chol_logdet(cov_chol) + quad)


def emission_logliks(
    params: ModelParams,
    x: np.ndarray,
    score_first_frame: bool = False,
) -> np.ndarray:
    """(T, K) matrix of per-frame, per-state emission log-densities.

    Row t >= 1, column s holds log N(x_t; a_s x_{t-1} + b_s, q_s). Row 0 is
    zero (pure conditioning) unless score_first_frame, in which case it holds
    log N(x_0; mu_s, sigma_s).
    """
    t_frames, d = x.shape
    k = params.n_states
    out = np.zeros((t_frames, k))
    prev = x[:-1]
    cur = x[1:]
    for s in range(k):
        dyn = params.dynamics[s]
        chol_q = chol_lower(dyn.q, what=f"state {s} noise covariance")
        pred = prev @ dyn.a.T + dyn.b
        out[1:, s] = gaussian_loglik(cur, pred, chol_q)
        if score_first_frame:
            g = params.gaussians[s]
            chol_sigma = chol_lower(g.sigma, what=f"state {s} envelope covariance")
            out[0, s] = gaussian_loglik(x[0:1], g.mu, chol_sigma)[0]
    return out


def forward_backward(
    log_pi: np.ndarray,
    log_trans: np.ndarray,
    log_emis: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Normalized smoothing posteriors for one chain.

    Returns (gamma, xi, loglik) where gamma[t, s] is the marginal state
    posterior, xi[t, i, j] the pairwise posterior for the step t -> t+1, and
    loglik the log evidence (the sum of the forward normalizers).
    """
    t_frames, k = log_emis.shape
    log_alpha = np.empty((t_frames, k))
    log_norm = np.empty(t_frames)

    u = log_pi + log_emis[0]
    log_norm[0] = logsumexp(u)
    log_alpha[0] = u - log_norm[0]
    for t in range(1, t_frames):
        u = logsumexp(log_alpha[t - 1][:, None] + log_trans, axis=0) + log_emis[t]
        log_norm[t] = logsumexp(u)
        log_alpha[t] = u - log_norm[t]

    loglik = float(log_norm.sum())
    if not np.isfinite(loglik):
        raise NumericalError("trajectory has zero likelihood under the model")

    # Backward messages rescaled by the forward normalizers, so
    # alpha_hat + beta_hat sums over states to exactly the log posterior.
    log_beta = np.empty((t_frames, k))
    log_beta[-1] = 0.0
    for t in range(t_frames - 2, -1, -1):
        log_beta[t] = (
            logsumexp(log_trans + (log_emis[t + 1] + log_beta[t + 1])[None, :], axis=1)
            - log_norm[t + 1]
        )

    log_gamma = log_alpha + log_beta
    gamma = np.exp(log_gamma)
    gamma /= gamma.sum(axis=1, keepdims=True)

    xi = np.empty((t_frames - 1, k, k))
    for t in range(t_frames - 1):
        log_xi = (
            log_alpha[t][:, None]
            + log_trans
            + (log_emis[t + 1] + log_beta[t + 1])[None, :]
            - log_norm[t + 1]
        )
        slab = np.exp(log_xi)
        xi[t] = slab / slab.sum()
    return gamma, xi, loglik


def accumulate_stats(gamma: np.ndarray, x: np.ndarray) -> RawStats:
    """Posterior-weighted sums for one trajectory (see RawStats)."""
    t_frames, k = gamma.shape
    d = x.shape[1]
    prev = x[:-1]
    cur = x[1:]
    g_pairs = gamma[1:]
    sxx_cur = np.empty((k, d, d))
    sxx_prev = np.empty((k, d, d))
    sxx_lag = np.empty((k, d, d))
    fxx = np.empty((k, d, d))
    for s in range(k):
        wc = g_pairs[:, s][:, None]
        sxx_cur[s] = (cur * wc).T @ cur
        sxx_prev[s] = (prev * wc).T @ prev
        sxx_lag[s] = (cur * wc).T @ prev
        fxx[s] = (x * gamma[:, s][:, None]).T @ x
    return RawStats(
        w=g_pairs.sum(axis=0),
        sx_cur=g_pairs.T @ cur,
        sx_prev=g_pairs.T @ prev,
        sxx_cur=sxx_cur,
        sxx_prev=sxx_prev,
        sxx_lag=sxx_lag,
        fw=gamma.sum(axis=0),
        fx=gamma.T @ x,
        fxx=fxx,
    )


def _log_probs(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _estep_one(
    params: ModelParams,
    x: np.ndarray,
    score_first_frame: bool,
) -> tuple[np.ndarray, np.ndarray, float, RawStats]:
    log_emis = emission_logliks(params, x, score_first_frame=score_first_frame)
    gamma, xi, loglik = forward_backward(
        _log_probs(params.pi), _log_probs(params.trans), log_emis
    )
    return gamma, xi, loglik, accumulate_stats(gamma, x)


def estep(
    params: ModelParams,
    trajectories: list[Trajectory],
    threads: int = 1,
    score_first_frame: bool = False,
) -> EStepResult:
    """Run inference over a batch of trajectories.

    Trajectories are processed independently (optionally across a thread
    pool) and combined in input order, so the result is identical for any
    thread count.
    """
    if not trajectories:
        raise ValueError("estep needs at least one trajectory")
    for traj in trajectories:
        if traj.dim != params.dim:
            raise ValueError(
                f"trajectory dimension {traj.dim} does not match model dimension {params.dim}"
            )
    args = [traj.data for traj in trajectories]
    if threads > 1 and len(args) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda x: _estep_one(params, x, score_first_frame), args))
    else:
        results = [_estep_one(params, x, score_first_frame) for x in args]

    # Deterministic fold in trajectory order.
    stats = RawStats.zeros(params.n_states, params.dim)
    loglik = 0.0
    for _, _, ll, st in results:
        loglik += ll
        stats = stats + st
    gamma = np.concatenate([r[0] for r in results], axis=0)
    xi = (
        np.concatenate([r[1] for r in results], axis=0)
        if results
        else np.zeros((0, params.n_states, params.n_states))
    )
    return EStepResult(
        gamma=gamma,
        xi=xi,
        loglik=loglik,
        stats=stats,
        lengths=tuple(t.n_frames for t in trajectories),
    )
