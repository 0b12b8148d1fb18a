"""Model types for metastable switching linear dynamical systems.

A model has K discrete states evolving by a Markov transition matrix. Within
state s the observation follows the affine-Gaussian recursion

    x_t = a_s x_{t-1} + b_s + w_t,   w_t ~ N(0, q_s)

and each state carries a Gaussian envelope N(mu_s, sigma_s) that upper-bounds
the stationary behaviour of its dynamics: the model is *stable* when
``|a_s|_2 <= eta < 1`` and ``sigma_s - q_s - a_s sigma_s a_s^T >= 0``. Under
those conditions (with ``b_s = mu_s - a_s mu_s``) iterating the recursion
drives the mean to mu_s and keeps the covariance below sigma_s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidParamsError, NumericalError
from .linalg import check_symmetric, min_eig, spectral_norm, symmetrize

DEFAULT_ETA = 0.99
DEFAULT_FEAS_TOL = 1e-6
DEFAULT_SIGMA_FLOOR_REL = 1e-6
DEFAULT_Q_FLOOR_REL = 1e-8
DEFAULT_SHIFT_RTOL = 1e-8

_PROB_TOL = 1e-12


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")


def rel_floor(sigma: np.ndarray, scale: float) -> float:
    """Eigenvalue floor proportional to the mean diagonal of sigma."""
    d = sigma.shape[0]
    return scale * float(np.trace(sigma)) / d


@dataclass(frozen=True)
class StateGaussian:
    """Gaussian envelope N(mu, sigma) of one metastable state."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        _require_finite(mu, "mu")
        _require_finite(sigma, "sigma")
        d = mu.shape[0]
        if sigma.shape != (d, d):
            raise ValueError(f"sigma must be {d}x{d}, got {sigma.shape}")
        check_symmetric(sigma, what="sigma")
        sigma = symmetrize(sigma)
        floor = rel_floor(sigma, DEFAULT_SIGMA_FLOOR_REL)
        if min_eig(sigma) < floor:
            raise ValueError(
                "sigma is not positive definite above the covariance floor; "
                "clamp eigenvalues before constructing"
            )
        object.__setattr__(self, "mu", _freeze(mu))
        object.__setattr__(self, "sigma", _freeze(sigma))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class StateDynamics:
    """Affine-Gaussian dynamics (a, b, q) of one metastable state."""

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        q = np.asarray(self.q, dtype=np.float64)
        d = b.shape[0]
        if a.shape != (d, d) or q.shape != (d, d):
            raise ValueError(f"a and q must be {d}x{d}, got {a.shape} and {q.shape}")
        for name, arr in (("a", a), ("b", b), ("q", q)):
            _require_finite(arr, name)
        check_symmetric(q, what="q")
        object.__setattr__(self, "a", _freeze(a))
        object.__setattr__(self, "b", _freeze(b))
        object.__setattr__(self, "q", _freeze(symmetrize(q)))

    @property
    def dim(self) -> int:
        return self.b.shape[0]


@dataclass(frozen=True)
class Trajectory:
    """One contiguous observation sequence, frames as rows."""

    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("trajectory data must be a T x d matrix")
        if data.shape[0] < 2:
            raise ValueError("a trajectory needs at least two frames")
        _require_finite(data, "trajectory data")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class StabilityReport:
    """Per-condition outcome of a stability check, with slack margins."""

    spectral_norm: float
    spectral_margin: float  # eta - |a|_2
    spectral_ok: bool
    lyapunov_margin: float  # min-eig(sigma - q - a sigma a^T)
    lyapunov_ok: bool
    shift_error: float  # relative |b - (mu - a mu)|
    shift_ok: bool

    @property
    def ok(self) -> bool:
        return self.spectral_ok and self.lyapunov_ok and self.shift_ok


def shift_from_mean(a: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Affine shift that makes mu the fixed point of x -> a x + b."""
    a = np.asarray(a, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if a.shape != (mu.shape[0], mu.shape[0]):
        raise ValueError(f"a must be {mu.shape[0]}x{mu.shape[0]}, got {a.shape}")
    return mu - a @ mu


def check_stability(
    dyn: StateDynamics,
    g: StateGaussian,
    eta: float = DEFAULT_ETA,
    tol: float = DEFAULT_FEAS_TOL,
    shift_rtol: float = DEFAULT_SHIFT_RTOL,
) -> StabilityReport:
    """Report whether (a, b, q) is stable with respect to the envelope (mu, sigma).

    Checks, with slack tolerance `tol`:
      1. |a|_2 <= eta + tol,
      2. min-eig(sigma - q - a sigma a^T) >= -tol,
      3. b equals mu - a mu within relative tolerance `shift_rtol`.
    """
    if dyn.dim != g.dim:
        raise ValueError("dynamics and envelope dimensions differ")
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    norm_a = spectral_norm(dyn.a)
    lyap = min_eig(g.sigma - dyn.q - dyn.a @ g.sigma @ dyn.a.T)
    b_target = shift_from_mean(dyn.a, g.mu)
    shift_scale = max(float(np.linalg.norm(b_target)), float(np.linalg.norm(g.mu)), 1.0)
    shift_err = float(np.linalg.norm(dyn.b - b_target)) / shift_scale
    return StabilityReport(
        spectral_norm=norm_a,
        spectral_margin=eta - norm_a,
        spectral_ok=norm_a <= eta + tol,
        lyapunov_margin=lyap,
        lyapunov_ok=lyap >= -tol,
        shift_error=shift_err,
        shift_ok=shift_err <= shift_rtol,
    )


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of a K-state switching model in dimension d."""

    n_states: int
    dim: int
    trans: np.ndarray
    pi: np.ndarray
    dynamics: tuple[StateDynamics, ...]
    gaussians: tuple[StateGaussian, ...]

    def __post_init__(self):
        k, d = self.n_states, self.dim
        if k < 1 or d < 1:
            raise InvalidParamsError("n_states and dim must be positive")
        trans = np.asarray(self.trans, dtype=np.float64)
        pi = np.asarray(self.pi, dtype=np.float64).reshape(-1)
        if trans.shape != (k, k):
            raise InvalidParamsError(f"trans must be {k}x{k}, got {trans.shape}")
        if pi.shape != (k,):
            raise InvalidParamsError(f"pi must have length {k}")
        _require_finite(trans, "trans")
        _require_finite(pi, "pi")
        if np.any(trans < 0.0) or np.any(np.abs(trans.sum(axis=1) - 1.0) > _PROB_TOL):
            raise InvalidParamsError("trans rows must be probability vectors")
        if np.any(pi < 0.0) or abs(float(pi.sum()) - 1.0) > _PROB_TOL:
            raise InvalidParamsError("pi must be a probability vector")
        dynamics = tuple(self.dynamics)
        gaussians = tuple(self.gaussians)
        if len(dynamics) != k or len(gaussians) != k:
            raise InvalidParamsError("need one dynamics and one envelope per state")
        for s in range(k):
            if dynamics[s].dim != d or gaussians[s].dim != d:
                raise InvalidParamsError(f"state {s} has wrong dimension")
        object.__setattr__(self, "trans", _freeze(trans))
        object.__setattr__(self, "pi", _freeze(pi))
        object.__setattr__(self, "dynamics", dynamics)
        object.__setattr__(self, "gaussians", gaussians)


def validate_stability(
    params: ModelParams,
    eta: float = DEFAULT_ETA,
    tol: float = DEFAULT_FEAS_TOL,
) -> list[StabilityReport]:
    """Run check_stability on every state; raise if any state fails.

    Structural invariants (shapes, stochasticity) are enforced at construction;
    this adds the stability conditions, which deliberately do not hold for
    unconstrained-mode models.
    """
    reports = []
    for s in range(params.n_states):
        rep = check_stability(params.dynamics[s], params.gaussians[s], eta=eta, tol=tol)
        if not rep.ok:
            raise InvalidParamsError(
                f"state {s} fails stability: |a|={rep.spectral_norm:.6f}, "
                f"lyapunov margin {rep.lyapunov_margin:.3e}, "
                f"shift error {rep.shift_error:.3e}"
            )
        reports.append(rep)
    return reports


def iterated_moments(
    dyn: StateDynamics,
    x0: np.ndarray,
    n: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the state after n steps of the affine recursion.

    Computed by the forward recursions mean <- a mean + b and
    cov <- q + a cov a^T from (x0, 0); O(n d^3) but numerically benign for
    stable dynamics.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != dyn.dim:
        raise ValueError("x0 dimension mismatch")
    a, b, q = dyn.a, dyn.b, dyn.q
    mean = x0.copy()
    cov = np.zeros((dyn.dim, dyn.dim))
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(n):
            mean = a @ mean + b
            cov = q + a @ cov @ a.T
            if step % 64 == 0 or step == n - 1:
                if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
                    raise NumericalError(f"iterated moments overflowed at step {step + 1}")
    return mean, symmetrize(cov)


def _state_rng(seed: int, traj_index: int) -> np.random.Generator:
    # Splittable keying: (seed, traj_index) gives independent, reproducible
    # streams regardless of how many trajectories are sampled in parallel.
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), int(traj_index)))))


def sample_trajectory(
    params: ModelParams,
    n_steps: int,
    seed: int,
    x0: np.ndarray | None = None,
    traj_index: int = 0,
    validate: bool = True,
    eta: float = DEFAULT_ETA,
    feas_tol: float = DEFAULT_FEAS_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (states, observations) from the generative model.

    Bit-reproducible for fixed (params, n_steps, seed, x0, traj_index). With
    x0 given, the first observation already follows the state-1 dynamics from
    x0; otherwise it is drawn from the first state's envelope. Set
    ``validate=False`` to sample from deliberately unstable parameter sets.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if validate:
        validate_stability(params, eta=eta, tol=feas_tol)
    k, d = params.n_states, params.dim
    rng = _state_rng(seed, traj_index)
    chol_q = [np.linalg.cholesky(params.dynamics[s].q) for s in range(k)]
    trans_cum = np.cumsum(params.trans, axis=1)
    pi_cum = np.cumsum(params.pi)

    states = np.empty(n_steps, dtype=np.int64)
    obs = np.empty((n_steps, d))
    s = int(np.searchsorted(pi_cum, rng.random(), side="right"))
    s = min(s, k - 1)
    states[0] = s
    if x0 is None:
        g = params.gaussians[s]
        chol_sigma = np.linalg.cholesky(g.sigma)
        obs[0] = g.mu + chol_sigma @ rng.standard_normal(d)
    else:
        x_prev = np.asarray(x0, dtype=np.float64).reshape(-1)
        if x_prev.shape[0] != d:
            raise ValueError("x0 dimension mismatch")
        dyn = params.dynamics[s]
        obs[0] = dyn.a @ x_prev + dyn.b + chol_q[s] @ rng.standard_normal(d)
    for t in range(1, n_steps):
        u = rng.random()
        s = int(np.searchsorted(trans_cum[s], u, side="right"))
        s = min(s, k - 1)
        states[t] = s
        dyn = params.dynamics[s]
        obs[t] = dyn.a @ obs[t - 1] + dyn.b + chol_q[s] @ rng.standard_normal(d)
    return states, obs


# ---------------------------------------------------------------------------
# Model file format
#
# UTF-8 JSON with fields n_states, dim, trans, pi, and a "states" list of
# per-state objects {"mu", "sigma", "a", "b", "q"}. Floats are written with 17
# significant digits so that serialization round-trips bit-exactly.
# ---------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_vector(v: np.ndarray) -> str:
    return "[" + ", ".join(_fmt_float(x) for x in v) + "]"


def _fmt_matrix(m: np.ndarray) -> str:
    return "[" + ", ".join(_fmt_vector(row) for row in m) + "]"


def model_to_json(params: ModelParams) -> str:
    """Serialize a model to the JSON model-file format."""
    parts = [
        "{\n",
        f'  "n_states": {params.n_states},\n',
        f'  "dim": {params.dim},\n',
        f'  "trans": {_fmt_matrix(params.trans)},\n',
        f'  "pi": {_fmt_vector(params.pi)},\n',
        '  "states": [\n',
    ]
    for s in range(params.n_states):
        g, dyn = params.gaussians[s], params.dynamics[s]
        parts.append(
            "    {"
            + f'"mu": {_fmt_vector(g.mu)}, '
            + f'"sigma": {_fmt_matrix(g.sigma)}, '
            + f'"a": {_fmt_matrix(dyn.a)}, '
            + f'"b": {_fmt_vector(dyn.b)}, '
            + f'"q": {_fmt_matrix(dyn.q)}'
            + "}"
            + ("," if s < params.n_states - 1 else "")
            + "\n"
        )
    parts.append("  ]\n}\n")
    return "".join(parts)


def model_from_json(text: str) -> ModelParams:
    """Parse the JSON model-file format back into ModelParams."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidParamsError(f"model file is not valid JSON: {exc}") from exc
    try:
        k = int(doc["n_states"])
        d = int(doc["dim"])
        trans = np.asarray(doc["trans"], dtype=np.float64)
        pi = np.asarray(doc["pi"], dtype=np.float64)
        states = doc["states"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidParamsError(f"model file is missing or has malformed fields: {exc}") from exc
    if len(states) != k:
        raise InvalidParamsError(f"model file lists {len(states)} states, expected {k}")
    dynamics = []
    gaussians = []
    for entry in states:
        try:
            gaussians.append(StateGaussian(np.asarray(entry["mu"]), np.asarray(entry["sigma"])))
            dynamics.append(
                StateDynamics(np.asarray(entry["a"]), np.asarray(entry["b"]), np.asarray(entry["q"]))
            )
        except (KeyError, ValueError) as exc:
            raise InvalidParamsError(f"bad per-state block in model file: {exc}") from exc
    return ModelParams(
        n_states=k, dim=d, trans=trans, pi=pi,
        dynamics=tuple(dynamics), gaussians=tuple(gaussians),
    )
