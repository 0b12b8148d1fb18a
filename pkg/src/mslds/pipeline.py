"""End-to-end fitting driver, baseline modes, and the synthetic benchmark.

``fit`` runs mixture initialization followed by EM. Three modes share the
loop:

* ``mslds`` — the full model: constrained M-steps keep every state's
  dynamics inside the stability region.
* ``slds`` — same model family with the stability constraints dropped;
  the noise covariance only gets an eigenvalue floor.
* ``hmm`` — per-state Gaussian emissions with no dynamics: implemented as
  dynamics locked to (A=0, b=mu, Q=sigma), which makes the per-frame
  emission exactly N(x_t; mu_s, sigma_s) while keeping scoring and sampling
  uniform across modes.

The observed-data log likelihood from the forward pass is the convergence
signal: the hidden variable is a discrete chain, so the evidence is exactly
computable and is the principled stopping metric.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataio import Dataset
from .errors import DataError, InvalidParamsError, NumericalError
from .estep import EStepResult, estep
from .gmm import GmmConfig, gmm_em, init_model
from .linalg import eigen_floor, symmetrize
from .model import (
    DEFAULT_ETA,
    DEFAULT_FEAS_TOL,
    DEFAULT_Q_FLOOR_REL,
    DEFAULT_SIGMA_FLOOR_REL,
    ModelParams,
    StateDynamics,
    StateGaussian,
    Trajectory,
    rel_floor,
    shift_from_mean,
    validate_stability,
)
from .mstep import (
    MStepConfig,
    default_mstep_solver,
    mstep_with_report,
    update_initial,
    update_transition,
)
from .solver import SolverConfig

MODES = ("mslds", "slds", "hmm")


@dataclass(frozen=True)
class FitConfig:
    """Everything one EM run depends on."""

    n_states: int
    max_em_iters: int = 100
    em_tol: float = 1e-5  # relative observed-loglik improvement threshold
    solver: SolverConfig = field(default_factory=default_mstep_solver)
    eta: float = DEFAULT_ETA
    sigma_floor_rel: float = DEFAULT_SIGMA_FLOOR_REL
    q_floor_rel: float = DEFAULT_Q_FLOOR_REL
    feas_tol: float = DEFAULT_FEAS_TOL
    mode: str = "mslds"
    seed: int = 0
    threads: int = 1
    p_stay_init: float = 0.95
    hmm_update_gaussians: bool = True

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be positive")
        for name in ("em_tol", "sigma_floor_rel", "q_floor_rel", "feas_tol"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")


@dataclass(frozen=True)
class IterationRecord:
    """One EM iteration: evidence before the M-step, then M-step outcome.

    surrogates_before and surrogates hold the per-state surrogate objective
    at the incoming and outgoing parameters under the same posterior, so
    their difference is exactly the M-step's guaranteed non-increase.
    """

    iteration: int
    loglik: float
    surrogates_before: np.ndarray
    surrogates: np.ndarray  # per-state surrogate objective after the M-step
    statuses: tuple[str, ...]  # per-state: updated / retained / inactive / hmm / final
    wall_time: float


@dataclass(frozen=True)
class FitReport:
    records: tuple[IterationRecord, ...]
    params: ModelParams
    reason: str  # "converged" or "max_iters"

    def __post_init__(self):
        records = tuple(self.records)
        for i, rec in enumerate(records):
            if rec.iteration != i:
                raise ValueError("iteration indices must be contiguous from 0")
            if not np.isfinite(rec.loglik):
                raise ValueError(f"iteration {i} has non-finite loglik")
        object.__setattr__(self, "records", records)

    @property
    def logliks(self) -> np.ndarray:
        return np.array([rec.loglik for rec in self.records])


def as_trajectories(dataset) -> list[Trajectory]:
    """Accept a Dataset, a single Trajectory, or a sequence of them."""
    if isinstance(dataset, Dataset):
        kept = [
            t
            for t, w in zip(dataset.trajectories, dataset.weights)
            if w != 0.0
        ]
        if np.any((dataset.weights != 0.0) & (dataset.weights != 1.0)):
            warnings.warn(
                "non-unit trajectory weights are carried in manifests but "
                "not used by estimation; treating them as 1",
                stacklevel=2,
            )
        trajs = kept
    elif isinstance(dataset, Trajectory):
        trajs = [dataset]
    else:
        trajs = list(dataset)
    if not trajs:
        raise DataError("need at least one trajectory")
    for t in trajs:
        if not isinstance(t, Trajectory):
            raise DataError(f"expected Trajectory, got {type(t).__name__}")
    dims = {t.dim for t in trajs}
    if len(dims) > 1:
        raise DataError(f"inconsistent trajectory dimensions {sorted(dims)}")
    return trajs


def _hmm_lock_dynamics(params: ModelParams) -> ModelParams:
    """Equip each state with the inert dynamics (0, mu, sigma).

    With A = 0 and Q = sigma the dynamic emission N(A x + b, Q) is exactly
    the envelope N(mu, sigma), so the shared E-step computes the Gaussian-HMM
    posterior verbatim; stability holds with zero margin (Q = sigma).
    """
    dynamics = tuple(
        StateDynamics(
            a=np.zeros((params.dim, params.dim)),
            b=np.array(g.mu),
            q=np.array(g.sigma),
        )
        for g in params.gaussians
    )
    return replace_params(params, dynamics=dynamics)


def replace_params(params: ModelParams, **kwargs) -> ModelParams:
    fields = {
        "n_states": params.n_states,
        "dim": params.dim,
        "trans": params.trans,
        "pi": params.pi,
        "dynamics": params.dynamics,
        "gaussians": params.gaussians,
    }
    fields.update(kwargs)
    return ModelParams(**fields)


def _hmm_mstep(
    est: EStepResult, params: ModelParams, cfg: FitConfig
) -> ModelParams:
    gammas = list(est.gamma_blocks())
    xis = list(est.xi_blocks())
    trans = update_transition(gammas, xis)
    pi = update_initial(gammas)
    gaussians = list(params.gaussians)
    if cfg.hmm_update_gaussians:
        for s in range(params.n_states):
            fw = float(est.stats.fw[s])
            if fw <= 0.0:
                continue
            mu = est.stats.fx[s] / fw
            cov = symmetrize(est.stats.fxx[s] / fw - np.outer(mu, mu))
            # 1% headroom over the envelope validator's recomputed floor.
            cov = eigen_floor(cov, 1.01 * rel_floor(cov, cfg.sigma_floor_rel))
            gaussians[s] = StateGaussian(mu=mu, sigma=cov)
    out = replace_params(params, trans=trans, pi=pi, gaussians=tuple(gaussians))
    out = _hmm_lock_dynamics(out)
    return out


def _dyn_statuses(report) -> tuple[str, ...]:
    out = []
    for s in range(report.active.shape[0]):
        if not report.active[s]:
            out.append("inactive")
        elif report.retained_a[s] and report.retained_q[s]:
            out.append("retained")
        else:
            out.append("updated")
    return tuple(out)


def fit(dataset, cfg: FitConfig) -> tuple[ModelParams, FitReport]:
    """Mixture initialization followed by EM until the evidence flattens.

    Stops when the relative evidence improvement stays below cfg.em_tol for
    three consecutive iterations, or at cfg.max_em_iters. The last recorded
    evidence always belongs to the returned parameters.
    """
    trajs = as_trajectories(dataset)
    pooled = np.concatenate([t.data for t in trajs], axis=0)
    gmm_cfg = GmmConfig(
        sigma_floor_rel=cfg.sigma_floor_rel, p_stay=cfg.p_stay_init
    )
    fit_gmm = gmm_em(pooled, cfg.n_states, cfg.seed, gmm_cfg)
    params = init_model(fit_gmm, gmm_cfg)
    if cfg.mode == "hmm":
        params = _hmm_lock_dynamics(params)

    mcfg = MStepConfig(
        solver=cfg.solver,
        eta=cfg.eta,
        q_floor_rel=cfg.q_floor_rel,
        threads=cfg.threads,
        constrained=cfg.mode == "mslds",
    )

    records: list[IterationRecord] = []
    nan_surr = np.full(cfg.n_states, np.nan)
    ll_prev = None
    streak = 0
    reason = "max_iters"
    for it in range(cfg.max_em_iters):
        started = time.perf_counter()
        est = estep(params, trajs, threads=cfg.threads)
        ll = est.loglik
        if ll_prev is not None:
            rel = (ll - ll_prev) / max(1.0, abs(ll_prev))
            streak = streak + 1 if rel < cfg.em_tol else 0
        if streak >= 3:
            records.append(
                IterationRecord(
                    iteration=it,
                    loglik=ll,
                    surrogates_before=nan_surr,
                    surrogates=nan_surr,
                    statuses=tuple("final" for _ in range(cfg.n_states)),
                    wall_time=time.perf_counter() - started,
                )
            )
            reason = "converged"
            break
        if cfg.mode == "hmm":
            params = _hmm_mstep(est, params, cfg)
            surr_before, surrogates = nan_surr, nan_surr
            statuses = tuple("hmm" for _ in range(cfg.n_states))
        else:
            params, mrep = mstep_with_report(est, params, mcfg)
            surr_before = mrep.surrogate_before
            surrogates = mrep.surrogate_after
            statuses = _dyn_statuses(mrep)
        if cfg.mode == "mslds":
            try:
                validate_stability(params, eta=cfg.eta, tol=cfg.feas_tol)
            except InvalidParamsError as exc:
                raise NumericalError(f"M-step left the stability region: {exc}") from exc
        records.append(
            IterationRecord(
                iteration=it,
                loglik=ll,
                surrogates_before=surr_before,
                surrogates=surrogates,
                statuses=statuses,
                wall_time=time.perf_counter() - started,
            )
        )
        ll_prev = ll
    if reason == "max_iters":
        # One more inference pass so the reported evidence matches the
        # parameters produced by the last M-step.
        started = time.perf_counter()
        est = estep(params, trajs, threads=cfg.threads)
        records.append(
            IterationRecord(
                iteration=len(records),
                loglik=est.loglik,
                surrogates_before=nan_surr,
                surrogates=nan_surr,
                statuses=tuple("final" for _ in range(cfg.n_states)),
                wall_time=time.perf_counter() - started,
            )
        )
    report = FitReport(records=tuple(records), params=params, reason=reason)
    return params, report


def score(
    params: ModelParams, dataset, threads: int = 1
) -> tuple[list[float], float]:
    """Observed-data log likelihood per trajectory and in total."""
    trajs = as_trajectories(dataset)
    per_traj = [estep(params, [t], threads=1).loglik for t in trajs]
    return per_traj, float(sum(per_traj))


# ---------------------------------------------------------------------------
# Synthetic double-well benchmark
# ---------------------------------------------------------------------------


def synth_double_well(
    wells: Sequence[tuple[Sequence[float], float]],
    n_steps: int,
    seed: int,
    noise: float = 0.1,
    hop: float = 0.005,
) -> Trajectory:
    """Piecewise Ornstein-Uhlenbeck paths over a set of wells.

    The latent well index is a sticky chain (total hop probability ``hop``
    per step, uniform over the other wells); within well w the update is
    x + kappa_w (center_w - x) + noise * N(0, I). That is a switching linear
    model with A = (1-kappa) I, b = kappa center, Q = noise^2 I, so the
    generator's parameters are known exactly; see double_well_params.
    """
    centers, kappas = _check_wells(wells)
    if n_steps < 2:
        raise DataError("n_steps must be at least 2")
    if noise < 0.0:
        raise DataError("noise must be non-negative")
    if not 0.0 <= hop <= 1.0:
        raise DataError("hop probability must lie in [0, 1]")
    k, d = centers.shape
    rng = np.random.default_rng(seed)
    obs = np.empty((n_steps, d))
    well = 0
    x = centers[0].copy()
    for t in range(n_steps):
        if t > 0 and k > 1 and rng.random() < hop:
            shift = 1 + int(rng.integers(k - 1))
            well = (well + shift) % k
        x = x + kappas[well] * (centers[well] - x) + noise * rng.standard_normal(d)
        obs[t] = x
    return Trajectory(data=obs, source_id=f"double-well(seed={seed})")


def double_well_params(
    wells: Sequence[tuple[Sequence[float], float]],
    noise: float,
    hop: float = 0.005,
) -> ModelParams:
    """The exact generator of synth_double_well as a switching model.

    Per well: A = (1-kappa) I, b = kappa center, Q = noise^2 I, and the
    envelope covariance is the stationary fixed point
    sigma = noise^2 / (1 - (1-kappa)^2) I, at which the stability inequality
    holds with equality. Requires noise > 0 and kappa in (0, 2).
    """
    centers, kappas = _check_wells(wells)
    if noise <= 0.0:
        raise DataError("the generator view needs noise > 0")
    k, d = centers.shape
    if np.any(np.abs(1.0 - kappas) >= 1.0):
        raise DataError("stationary envelopes need kappa in (0, 2)")
    if k == 1:
        trans = np.ones((1, 1))
    else:
        trans = np.full((k, k), hop / (k - 1))
        np.fill_diagonal(trans, 1.0 - hop)
    dynamics = []
    gaussians = []
    eye = np.eye(d)
    for s in range(k):
        a = (1.0 - kappas[s]) * eye
        sigma = noise**2 / (1.0 - (1.0 - kappas[s]) ** 2) * eye
        dynamics.append(
            StateDynamics(a=a, b=shift_from_mean(a, centers[s]), q=noise**2 * eye)
        )
        gaussians.append(StateGaussian(mu=centers[s], sigma=sigma))
    return ModelParams(
        n_states=k,
        dim=d,
        trans=trans,
        pi=np.full(k, 1.0 / k),
        dynamics=tuple(dynamics),
        gaussians=tuple(gaussians),
    )


def _check_wells(
    wells: Sequence[tuple[Sequence[float], float]],
) -> tuple[np.ndarray, np.ndarray]:
    if not wells:
        raise DataError("need at least one well")
    centers = []
    kappas = []
    for entry in wells:
        try:
            center, kappa = entry
        except (TypeError, ValueError) as exc:
            raise DataError("each well must be a (center, stiffness) pair") from exc
        centers.append(np.asarray(center, dtype=np.float64).reshape(-1))
        kappas.append(float(kappa))
    d = centers[0].shape[0]
    if any(c.shape[0] != d for c in centers):
        raise DataError("well centers must share one dimension")
    if any(not 0.0 < k_ <= 2.0 for k_ in kappas):
        raise DataError("stiffness must lie in (0, 2]")
    return np.stack(centers), np.asarray(kappas)


def coherence_metric(obs: np.ndarray | Trajectory, window: int = 1) -> float:
    """Dimensionless roughness of a path: RMS lag-`window` increment over
    the pooled standard deviation.

    For i.i.d. frames the value approaches sqrt(2) (independent draws), for
    a near-identity autoregression sqrt(2 (1 - a)); low values mean the path
    moves through state space coherently instead of teleporting.
    """
    if isinstance(obs, Trajectory):
        obs = obs.data
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.ndim != 2 or obs.shape[0] < 2:
        raise DataError("need a T x d matrix with at least two frames")
    if not 1 <= window < obs.shape[0]:
        raise DataError("window must lie in [1, T)")
    diffs = obs[window:] - obs[:-window]
    pooled_var = float(np.sum(np.var(obs, axis=0)))
    if pooled_var <= 0.0:
        return 0.0
    return float(np.sqrt(np.mean(np.sum(diffs**2, axis=1)) / pooled_var))
