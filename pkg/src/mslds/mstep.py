"""M-step parameter updates for the switching linear model.

Refits the transition matrix and initial distribution from posteriors, and
per state alternates two convex matrix programs over the shared PSD solver:

  A-step   minimize  Tr[Q^-1 (A etil A^T - btil A^T - A btil^T)]
           subject to  [[Sigma - Q, A], [A^T, Sigma^-1]] >= 0   (Lyapunov)
                       [[eta I,    A], [A^T, I       ]] >= 0   (spectral)

  Q-step   minimize  -w log det(R) + Tr(R F)   over R = Q^-1
           subject to  [[Sigma - A Sigma A^T, I], [I, R]] >= 0

The mean shift b is never a free parameter: substituting b = mu - A mu (the
stationary-mean anchor) turns the residual x_t - A x_{t-1} - b into
(x_t - mu) - A (x_{t-1} - mu), so both programs depend on the data only
through posterior-weighted centered moments. Each program is embedded into
one symmetric PSD variable whose fixed sub-blocks are pinned by affine
equality constraints; a PSD variable makes every diagonal super-block PSD
simultaneously, which is exactly the conjunction of the factorized
constraints. State envelopes (mu, Sigma) are kept fixed here.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .estep import EStepResult, RawStats
from .linalg import (
    chol_logdet,
    chol_lower,
    eigen_floor,
    min_eig,
    spd_inverse,
    spectral_norm,
    symmetrize,
)
from .model import (
    DEFAULT_ETA,
    DEFAULT_Q_FLOOR_REL,
    ModelParams,
    StateDynamics,
    StateGaussian,
    rel_floor,
    shift_from_mean,
)
from .solver import (
    AffineConstraint,
    BlockEmbedding,
    ConvexProblem,
    LogDetBlockObjective,
    QuadraticBlockObjective,
    SolverConfig,
    feasibility_search,
)

DEFAULT_TRANS_FLOOR = 1e-8
DEFAULT_ACTIVITY_FLOOR_REL = 1e-6

# The Q-program needs a finite trace budget for the free R = Q^-1 block. The
# worst-case budget d / q_floor is astronomically loose and would flatten the
# solver's progress per step, so the budget starts at a data-driven estimate
# (what the stationarity and Schur conditions say tr(R) can reach, times this
# margin) and doubles on contact, never beyond the worst case.
_R_BUDGET_MARGIN = 4.0
_R_BUDGET_EXPANSIONS = 4
_R_BUDGET_CONTACT = 0.9


# ---------------------------------------------------------------------------
# Centered sufficient statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CenteredStats:
    """Posterior-weighted moments of centered frames xt = x - mu, per state.

    w      total pair weight (sum of the posterior over frame pairs)
    btil   sum gamma * xt_cur xt_prev^T   (cross moment)
    etil   sum gamma * xt_prev xt_prev^T
    ctil   sum gamma * xt_cur xt_cur^T
    """

    w: float
    btil: np.ndarray
    etil: np.ndarray
    ctil: np.ndarray

    @property
    def dim(self) -> int:
        return self.btil.shape[0]


def center_stats(stats: RawStats, mus: np.ndarray) -> tuple[CenteredStats, ...]:
    """Centered per-state moments, by expanding the (x - mu) products.

    Every centered moment is an affine combination of the raw sums and mu;
    no second pass over the data is needed.
    """
    mus = np.asarray(mus, dtype=np.float64)
    out = []
    for s in range(stats.w.shape[0]):
        mu = mus[s]
        w = float(stats.w[s])
        cur_mu = np.outer(stats.sx_cur[s], mu)
        prev_mu = np.outer(stats.sx_prev[s], mu)
        mu_mu = w * np.outer(mu, mu)
        btil = stats.sxx_lag[s] - cur_mu - prev_mu.T + mu_mu
        etil = symmetrize(stats.sxx_prev[s] - prev_mu - prev_mu.T + mu_mu)
        ctil = symmetrize(stats.sxx_cur[s] - cur_mu - cur_mu.T + mu_mu)
        out.append(CenteredStats(w=w, btil=btil, etil=etil, ctil=ctil))
    return tuple(out)


def residual_quadratic(cs: CenteredStats, a: np.ndarray) -> np.ndarray:
    """Weighted residual outer-product sum F(A), with b = mu - A mu.

    F(A) = ctil - btil A^T - A btil^T + A etil A^T.
    """
    cross = cs.btil @ a.T
    return symmetrize(cs.ctil - cross - cross.T + a @ cs.etil @ a.T)


def dynamics_surrogate(cs: CenteredStats, a: np.ndarray, q: np.ndarray) -> float:
    """Posterior-weighted negative Gaussian log-likelihood of the dynamics.

    Equals (w log det Q + Tr(Q^-1 F(A))) / 2, dropping the dimensional
    2*pi constant; the per-state quantity EM drives downward.
    """
    f = residual_quadratic(cs, a)
    logdet = chol_logdet(chol_lower(q))
    return 0.5 * (cs.w * logdet + float(np.sum(spd_inverse(q) * f)))


# ---------------------------------------------------------------------------
# Transition and initial-distribution updates
# ---------------------------------------------------------------------------


def update_transition(gammas, xis, floor: float = DEFAULT_TRANS_FLOOR) -> np.ndarray:
    """Row-normalized ratio of pair posteriors to state posteriors.

    T[i, j] = sum_t xi[t, i, j] / sum_t gamma[t, i], the gamma sum running
    over pair-leading frames. Rows whose posterior mass falls below `floor`
    fall back to the uniform row; every row is renormalized to sum to one.
    """
    gammas = [np.asarray(g, dtype=np.float64) for g in gammas]
    xis = [np.asarray(x, dtype=np.float64) for x in xis]
    if not gammas or len(gammas) != len(xis):
        raise ValueError("need matching, non-empty gamma and xi sequences")
    k = gammas[0].shape[1]
    num = np.zeros((k, k))
    den = np.zeros(k)
    for g, x in zip(gammas, xis):
        if x.shape[0] != g.shape[0] - 1:
            raise ValueError("xi must have one slice per consecutive frame pair")
        num += x.sum(axis=0)
        den += g[:-1].sum(axis=0)
    trans = np.empty((k, k))
    for i in range(k):
        row_mass = float(num[i].sum())
        if den[i] < floor or row_mass <= 0.0:
            trans[i] = 1.0 / k
        else:
            row = num[i] / den[i]
            trans[i] = row / row.sum()
    return trans


def update_initial(gammas) -> np.ndarray:
    """Normalized mean of the first-frame posteriors across trajectories."""
    firsts = np.stack([np.asarray(g, dtype=np.float64)[0] for g in gammas])
    pi = firsts.mean(axis=0)
    total = float(pi.sum())
    if total <= 0.0:
        return np.full(pi.shape[0], 1.0 / pi.shape[0])
    return pi / total


# ---------------------------------------------------------------------------
# Block embeddings with pinned values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PinnedEmbedding(BlockEmbedding):
    """Block layout together with the numeric value of every pinned block."""

    pinned: dict = field(default_factory=dict)

    def build(self, free_values: dict) -> np.ndarray:
        """Assemble a full solver matrix from pinned blocks and free values."""
        x = np.zeros((self.dim, self.dim))
        for name, (r0, c0, nr, nc) in self.blocks.items():
            val = free_values[name] if name in free_values else self.pinned[name]
            x[r0 : r0 + nr, c0 : c0 + nc] = val
            if r0 != c0:
                x[c0 : c0 + nc, r0 : r0 + nr] = np.asarray(val).T
        return symmetrize(x)


def _pin_symmetric(cons: list, r0: int, mat: np.ndarray) -> None:
    """Pin the upper triangle of a diagonal block to the entries of mat."""
    d = mat.shape[0]
    for i in range(d):
        for j in range(i, d):
            cons.append(
                AffineConstraint(((r0 + i, r0 + j, 1.0),), float(mat[i, j]))
            )


def _pin_full(cons: list, r0: int, c0: int, mat: np.ndarray) -> None:
    """Pin every entry of an off-diagonal block (the mirror is implied)."""
    nr, nc = mat.shape
    for i in range(nr):
        for j in range(nc):
            cons.append(
                AffineConstraint(((r0 + i, c0 + j, 1.0),), float(mat[i, j]))
            )


def _tie_blocks(cons: list, b1: tuple[int, int], b2: tuple[int, int], d: int) -> None:
    """Constrain two d x d blocks to be entrywise equal."""
    (r1, c1), (r2, c2) = b1, b2
    for i in range(d):
        for j in range(d):
            cons.append(
                AffineConstraint(
                    ((r1 + i, c1 + j, 1.0), (r2 + i, c2 + j, -1.0)), 0.0
                )
            )


def _shrink_to_feasible(a: np.ndarray, feasible, iters: int = 60) -> np.ndarray:
    """Scale a matrix toward zero until `feasible` accepts it.

    Both stability constraints are monotone under a -> t a with t in [0, 1]
    (the quadratic terms scale by t^2), so bisection on t is exact. t = 0 is
    always feasible.
    """
    if feasible(a):
        return a
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(mid * a):
            lo = mid
        else:
            hi = mid
    return lo * a


def _psd_clamp(q: np.ndarray, cap: np.ndarray) -> np.ndarray:
    """Clip q against cap in the PSD order: whiten by cap, clamp eigenvalues
    at one, unwhiten. Identity whenever q <= cap already holds."""
    d = cap.shape[0]
    cap_floor = rel_floor(cap, 1e-14) + np.finfo(np.float64).tiny
    chol = chol_lower(eigen_floor(cap, cap_floor))
    tmp = np.linalg.solve(chol, symmetrize(q))
    white = symmetrize(np.linalg.solve(chol, tmp.T).T)
    vals, vecs = np.linalg.eigh(white)
    if vals[-1] <= 1.0:
        return symmetrize(q)
    clipped = (vecs * np.minimum(vals, 1.0)) @ vecs.T
    return symmetrize(chol @ clipped @ chol.T)


# ---------------------------------------------------------------------------
# A-program: state map under Lyapunov and spectral constraints
# ---------------------------------------------------------------------------


def assemble_A_problem(
    cs: CenteredStats,
    q: np.ndarray,
    g: StateGaussian,
    eta: float = DEFAULT_ETA,
) -> tuple[ConvexProblem, PinnedEmbedding]:
    """Quadratic program for the state map A at fixed noise covariance Q.

    The 4d x 4d solver variable holds two diagonal super-blocks, one per
    stability constraint:

        [[Sigma - Q, A], [A^T, Sigma^-1]]   and   [[eta I, A'], [A'^T, I]]

    Equality constraints pin the four fixed diagonal sub-blocks and tie the
    two A copies entrywise; the objective reads A as the average of the
    copies. The pins force the trace, so the trace bound is exactly
    tr(Sigma - Q) + tr(Sigma^-1) + d (1 + eta).
    """
    q = symmetrize(np.asarray(q, dtype=np.float64))
    d = g.dim
    if q.shape != (d, d):
        raise ValueError(f"q must be {d}x{d}, got {q.shape}")
    sigma = g.sigma
    chol_lower(q)  # raises if the previous Q is not positive definite
    sig_inv = spd_inverse(sigma)
    gap = symmetrize(sigma - q)
    scale = float(np.trace(sigma)) / d
    if min_eig(gap) < -1e-8 * scale:
        raise NumericalError(
            "Sigma - Q is indefinite: clamp Q against Sigma before the A-step"
        )
    gap = eigen_floor(gap, 0.0)
    eye = np.eye(d)
    blocks = {
        "lyap_gap": (0, 0, d, d),
        "a1": (0, d, d, d),
        "sigma_inv": (d, d, d, d),
        "eta_eye": (2 * d, 2 * d, d, d),
        "a2": (2 * d, 3 * d, d, d),
        "eye": (3 * d, 3 * d, d, d),
    }
    pinned = {
        "lyap_gap": gap,
        "sigma_inv": sig_inv,
        "eta_eye": eta * eye,
        "eye": eye,
    }
    embedding = PinnedEmbedding(
        dim=4 * d, blocks=blocks, free=("a1", "a2"), pinned=pinned
    )
    cons: list[AffineConstraint] = []
    _pin_symmetric(cons, 0, gap)
    _pin_symmetric(cons, d, sig_inv)
    _pin_symmetric(cons, 2 * d, eta * eye)
    _pin_symmetric(cons, 3 * d, eye)
    _tie_blocks(cons, (0, d), (2 * d, 3 * d), d)
    objective = QuadraticBlockObjective(
        qinv=spd_inverse(q),
        btil=np.asarray(cs.btil, dtype=np.float64),
        etil=eigen_floor(cs.etil, 0.0),
        copies=((0, d), (2 * d, 3 * d)),
        dim=d,
    )
    trace_bound = float(np.trace(gap) + np.trace(sig_inv)) + d * (1.0 + eta)
    prob = ConvexProblem(
        dim=4 * d,
        objective=objective,
        ineq_constraints=(),
        eq_constraints=tuple(cons),
        trace_bound=trace_bound,
        layout=embedding,
    )
    return prob, embedding


def _read_a(embedding: PinnedEmbedding, x: np.ndarray) -> np.ndarray:
    return 0.5 * (embedding.read(x, "a1") + embedding.read(x, "a2"))


def solve_A(
    prob: ConvexProblem,
    embedding: PinnedEmbedding,
    cfg: SolverConfig,
    a_prev: np.ndarray | None = None,
) -> np.ndarray:
    """Solve the assembled A-program; returns the new state map.

    The returned matrix is shrunk into the eta spectral ball (scaling a
    matrix toward zero preserves the Lyapunov constraint, so the shrink is
    always safe) and retained against the previous map: if the previous map
    scores a lower objective, it is returned unchanged.
    """
    obj = prob.objective
    gap = embedding.pinned["lyap_gap"]
    eta = float(embedding.pinned["eta_eye"][0, 0])
    sigma = spd_inverse(embedding.pinned["sigma_inv"])
    d = gap.shape[0]
    scale = max(float(np.trace(sigma)) / d, 1.0)
    tol = 1e-12 * scale

    def feasible(a: np.ndarray) -> bool:
        # Feasibility of the two super-blocks: A A^T <= eta I (spectral
        # block Schur complement) and A Sigma A^T <= Sigma - Q (Lyapunov).
        if spectral_norm(a) ** 2 > eta + tol:
            return False
        return min_eig(gap - a @ sigma @ a.T) >= -tol

    l_mat = chol_lower(sigma)
    g_vals, g_vecs = np.linalg.eigh(gap)
    g_vals = np.maximum(g_vals, 1e-14 * scale)
    g_sqrt = (g_vecs * np.sqrt(g_vals)) @ g_vecs.T
    g_isqrt = (g_vecs / np.sqrt(g_vals)) @ g_vecs.T
    spec_cap = math.sqrt(eta)

    def clip_feasible(a: np.ndarray) -> np.ndarray:
        # Per-direction projection: clip singular values against the spectral
        # ball, then against the Lyapunov ellipsoid in its whitened metric
        # (A Sigma A^T <= G is |G^-1/2 A L|_2 <= 1 with Sigma = L L^T). A
        # uniform shrink would drag every direction down by the worst
        # direction's excess; the clips only touch the violating ones.
        for _ in range(25):
            if feasible(a):
                return a
            u_s, s_s, vt_s = np.linalg.svd(a)
            if s_s[0] > spec_cap:
                a = (u_s * np.minimum(s_s, spec_cap)) @ vt_s
            b = g_isqrt @ a @ l_mat
            u_l, s_l, vt_l = np.linalg.svd(b)
            if s_l[0] > 1.0:
                b = (u_l * np.minimum(s_l, 1.0)) @ vt_l
                a = np.linalg.solve(l_mat.T, (g_sqrt @ b).T).T
        return _shrink_to_feasible(a, feasible)

    def reproject(x: np.ndarray) -> np.ndarray:
        a = clip_feasible(_read_a(embedding, x))
        return embedding.build({"a1": a, "a2": a})

    starts = []
    if a_prev is not None:
        starts.append(clip_feasible(np.asarray(a_prev, dtype=np.float64)))
    try:
        # The projected unconstrained optimum launches the search near the
        # answer; the search still owns the coupled corrections, where the
        # projection is not optimal.
        a_unc = np.linalg.lstsq(obj.etil, obj.btil.T, rcond=None)[0].T
        starts.append(clip_feasible(a_unc))
    except np.linalg.LinAlgError:
        pass
    x0 = None
    if starts:
        a0 = min(starts, key=obj.value_at)
        x0 = embedding.build({"a1": a0, "a2": a0})
    res = feasibility_search(prob, cfg, x0=x0, reproject=reproject)
    if not res.success:
        if a_prev is None:
            raise NumericalError("A-program: feasibility search failed")
        return np.array(a_prev, dtype=np.float64)
    a_new = clip_feasible(_read_a(embedding, res.x))
    norm = spectral_norm(a_new)
    if norm > eta:
        a_new = a_new * (eta / norm)
    if a_prev is not None:
        a_prev = np.array(a_prev, dtype=np.float64)
        if obj.value_at(a_new) > obj.value_at(a_prev):
            return a_prev
    return a_new


# ---------------------------------------------------------------------------
# Q-program: noise covariance under the Lyapunov cap
# ---------------------------------------------------------------------------


def assemble_Q_problem(
    cs: CenteredStats,
    a: np.ndarray,
    g: StateGaussian,
    q_floor: float | None = None,
    budget_margin: float = _R_BUDGET_MARGIN,
) -> tuple[ConvexProblem, PinnedEmbedding]:
    """Log-det program for the noise covariance at a fixed state map A.

    Change of variable R = Q^-1 makes the objective -w log det R + Tr(R F)
    convex; the 2d x 2d solver variable is [[Sigma - A Sigma A^T, I], [I, R]]
    with the top-left and off-diagonal blocks pinned, whose PSD-ness is
    exactly the Lyapunov cap Q <= Sigma - A Sigma A^T.
    """
    a = np.asarray(a, dtype=np.float64)
    d = g.dim
    sigma = g.sigma
    scale = float(np.trace(sigma)) / d
    if q_floor is None:
        q_floor = rel_floor(sigma, DEFAULT_Q_FLOOR_REL)
    s_mat = symmetrize(sigma - a @ sigma @ a.T)
    if min_eig(s_mat) < -1e-8 * scale:
        raise NumericalError(
            "Sigma - A Sigma A^T is indefinite: the state map is out of contract"
        )
    s_mat = eigen_floor(s_mat, 0.0)
    f_mat = eigen_floor(residual_quadratic(cs, a), 0.0)
    w = float(cs.w)
    if w <= 0.0:
        raise ValueError("Q-program needs positive posterior mass")

    # Trace budget for the free R block. The optimum satisfies the
    # stationarity/Schur bounds R ~ w F^-1 and R >= (Sigma - A Sigma A^T)^-1,
    # so a data-driven budget (floored pseudo-inverses, times a margin)
    # covers it; the worst case d / q_floor is kept as a hard cap.
    f_fl = eigen_floor(f_mat, max(rel_floor(f_mat, 1e-8), w * scale * 1e-12))
    s_fl = eigen_floor(s_mat, rel_floor(sigma, 1e-8))
    r_estimate = w * float(np.trace(spd_inverse(f_fl))) + float(
        np.trace(spd_inverse(s_fl))
    )
    r_budget = min(budget_margin * r_estimate, d / q_floor)

    eye = np.eye(d)
    blocks = {
        "lyap_cap": (0, 0, d, d),
        "cross_eye": (0, d, d, d),
        "r": (d, d, d, d),
    }
    pinned = {"lyap_cap": s_mat, "cross_eye": eye}
    embedding = PinnedEmbedding(dim=2 * d, blocks=blocks, free=("r",), pinned=pinned)
    cons: list[AffineConstraint] = []
    _pin_symmetric(cons, 0, s_mat)
    _pin_full(cons, 0, d, eye)
    objective = LogDetBlockObjective(g_scale=w, f_mat=f_mat, corner=d, dim=d)
    prob = ConvexProblem(
        dim=2 * d,
        objective=objective,
        ineq_constraints=(),
        eq_constraints=tuple(cons),
        trace_bound=float(np.trace(s_mat)) + r_budget,
        layout=embedding,
    )
    return prob, embedding


def solve_Q(
    prob: ConvexProblem,
    embedding: PinnedEmbedding,
    cfg: SolverConfig,
    q_prev: np.ndarray | None = None,
    q_floor: float = 0.0,
) -> np.ndarray:
    """Solve the assembled Q-program; returns the new noise covariance.

    Q = R^-1 is eigenvalue-floored at q_floor, clamped against the Lyapunov
    cap in the PSD order, and retained against the previous covariance when
    the previous one scores a lower objective.
    """
    obj = prob.objective
    s_mat = embedding.pinned["lyap_cap"]
    d = s_mat.shape[0]
    s_floor = rel_floor(s_mat, 1e-12) + np.finfo(np.float64).tiny
    s_inv = spd_inverse(eigen_floor(s_mat, s_floor))
    r_budget = prob.trace_bound - float(np.trace(s_mat))

    def lift(r: np.ndarray) -> np.ndarray:
        # Exact Schur feasibility: R >= S^-1, then respect the trace budget.
        r = s_inv + eigen_floor(symmetrize(r) - s_inv, 0.0)
        excess = float(np.trace(r)) - r_budget
        if excess > 0.0:
            slack = r - s_inv
            tr_slack = float(np.trace(slack))
            if tr_slack > excess:
                r = s_inv + slack * ((tr_slack - excess) / tr_slack)
            else:
                r = s_inv
        return r

    def best_in_cone(r: np.ndarray) -> np.ndarray:
        # Every point of S^-1 + cone(slack eigendirections) is feasible, and
        # the objective restricted to one coefficient (others held fixed) has
        # a closed-form minimizer through the rank-1 determinant identity, so
        # the cleaning can run coordinate descent over the cone instead of
        # keeping the iterate's own coefficients. This removes the bias the
        # plain eigen-floor inherits from the certified pin slack: at optima
        # that touch the Schur floor the floor keeps O(sqrt(eps))
        # positive-part junk, while the per-direction minimum lands on the
        # floor exactly. The iterate still decides the directions; only their
        # magnitudes are re-fit.
        r1 = lift(r)
        lam, vecs = np.linalg.eigh(symmetrize(r1 - s_inv))
        lam = np.clip(lam, 0.0, None)
        keep = lam > np.max(lam, initial=0.0) * 1e-12
        if not np.any(keep):
            return s_inv
        lam, vecs = lam[keep], vecs[:, keep]
        w = obj.g_scale
        f_dir = np.einsum("ji,jk,ki->i", vecs, obj.f_mat, vecs)
        budget = max(r_budget - float(np.trace(s_inv)), 0.0)
        t = np.ones(lam.shape[0])
        cur = r1
        for _ in range(16):
            shift = 0.0
            for i in range(lam.shape[0]):
                base = symmetrize(cur - (t[i] * lam[i]) * np.outer(vecs[:, i], vecs[:, i]))
                u = float(vecs[:, i] @ np.linalg.solve(base, vecs[:, i]))
                head = budget - float(np.sum(t * lam)) + t[i] * lam[i]
                cap = max(head / lam[i], 0.0)
                if f_dir[i] * u > 0.0:
                    t_new = min(max((w * u - f_dir[i]) / (f_dir[i] * lam[i] * u), 0.0), cap)
                else:
                    t_new = cap
                shift = max(shift, abs(t_new - t[i]) * lam[i])
                t[i] = t_new
                cur = symmetrize(base + (t[i] * lam[i]) * np.outer(vecs[:, i], vecs[:, i]))
            if shift <= 1e-12 * max(float(np.trace(cur)), 1.0):
                break
        return cur

    def reproject(x: np.ndarray) -> np.ndarray:
        return embedding.build({"r": best_in_cone(embedding.read(x, "r"))})

    def to_q(r: np.ndarray) -> np.ndarray:
        r = eigen_floor(symmetrize(r), rel_floor(r, 1e-14) + np.finfo(np.float64).tiny)
        q = spd_inverse(r)
        if q_floor > 0.0:
            q = eigen_floor(q, q_floor)
        return _psd_clamp(q, s_mat)

    def q_objective(q: np.ndarray) -> float:
        try:
            return obj.value_at(spd_inverse(q))
        except (np.linalg.LinAlgError, NumericalError):
            return np.inf

    x0 = None
    if q_prev is not None:
        q0 = _psd_clamp(np.asarray(q_prev, dtype=np.float64), s_mat)
        try:
            r0 = lift(spd_inverse(eigen_floor(q0, q_floor if q_floor > 0 else s_floor)))
            x0 = embedding.build({"r": r0})
        except (np.linalg.LinAlgError, NumericalError):
            x0 = None
    res = feasibility_search(prob, cfg, x0=x0, reproject=reproject)
    if not res.success:
        if q_prev is None:
            raise NumericalError("Q-program: feasibility search failed")
        return _psd_clamp(np.asarray(q_prev, dtype=np.float64), s_mat)
    q_new = to_q(embedding.read(res.x, "r"))
    if q_prev is not None:
        q_prev_clamped = _psd_clamp(np.asarray(q_prev, dtype=np.float64), s_mat)
        if q_objective(q_new) > q_objective(q_prev_clamped):
            return q_prev_clamped
    return q_new


# ---------------------------------------------------------------------------
# Unconstrained closed forms (stability constraints dropped)
# ---------------------------------------------------------------------------


def unconstrained_dynamics(
    cs: CenteredStats, q_floor: float
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares state map and residual covariance, no stability terms.

    A = btil etil^-1 (ridge-regularized against singular moments) and
    Q = F(A) / w, eigenvalue-floored. This is the degenerate no-constraint
    variant of the per-state problem.
    """
    d = cs.dim
    ridge = max(rel_floor(cs.etil, 1e-10), np.finfo(np.float64).tiny)
    a = np.linalg.solve(cs.etil + ridge * np.eye(d), cs.btil.T).T
    q = residual_quadratic(cs, a) / max(cs.w, np.finfo(np.float64).tiny)
    return a, eigen_floor(q, q_floor)


# ---------------------------------------------------------------------------
# Full M-step driver
# ---------------------------------------------------------------------------


def default_mstep_solver() -> SolverConfig:
    """Solver settings tuned for the per-state programs.

    Probes are capped well below the general step budget (their failures need
    no certificate) and give up once the target is extrapolated out of reach;
    the polish gap is tight because the final parameter accuracy in
    low-curvature cells is set by the polish stage's stationarity, not by the
    eps-granular descent loop.
    """
    return SolverConfig(probe_fw_steps=120, futility_window=12, polish_gap=2e-6, polish_rounds=3)


@dataclass(frozen=True)
class MStepConfig:
    """Knobs for one M-step: solver settings and degradation floors."""

    solver: SolverConfig = field(default_factory=default_mstep_solver)
    eta: float = DEFAULT_ETA
    trans_floor: float = DEFAULT_TRANS_FLOOR
    activity_floor_rel: float = DEFAULT_ACTIVITY_FLOOR_REL
    q_floor_rel: float = DEFAULT_Q_FLOOR_REL
    sweeps: int = 1
    threads: int = 1
    constrained: bool = True


@dataclass(frozen=True)
class MStepReport:
    """Per-state surrogate objectives around one M-step."""

    surrogate_before: np.ndarray
    surrogate_after: np.ndarray
    active: np.ndarray
    retained_a: np.ndarray
    retained_q: np.ndarray


def _solve_state(
    cs: CenteredStats,
    dyn: StateDynamics,
    g: StateGaussian,
    cfg: MStepConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """One block-coordinate pass (A-step then Q-step) for a single state."""
    sigma = g.sigma
    q_floor = rel_floor(sigma, cfg.q_floor_rel)
    a_cur = np.array(dyn.a, dtype=np.float64)
    q_cur = np.array(dyn.q, dtype=np.float64)
    for _ in range(cfg.sweeps):
        q_for_a = eigen_floor(_psd_clamp(q_cur, sigma), q_floor)
        try:
            prob_a, emb_a = assemble_A_problem(cs, q_for_a, g, eta=cfg.eta)
            a_cur = solve_A(prob_a, emb_a, cfg.solver, a_prev=a_cur)
        except NumericalError:
            pass
        q_cur = _solve_state_q(cs, a_cur, g, q_cur, q_floor, cfg)
    return a_cur, q_cur


def _solve_state_q(
    cs: CenteredStats,
    a: np.ndarray,
    g: StateGaussian,
    q_prev: np.ndarray,
    q_floor: float,
    cfg: MStepConfig,
) -> np.ndarray:
    """Q-step with adaptive trace-budget expansion on contact."""
    margin = _R_BUDGET_MARGIN
    q_out = q_prev
    for attempt in range(_R_BUDGET_EXPANSIONS):
        try:
            prob_q, emb_q = assemble_Q_problem(
                cs, a, g, q_floor=q_floor, budget_margin=margin
            )
            q_out = solve_Q(prob_q, emb_q, cfg.solver, q_prev=q_prev, q_floor=q_floor)
        except NumericalError:
            return _psd_clamp(np.array(q_prev, dtype=np.float64),
                              symmetrize(g.sigma - a @ g.sigma @ a.T))
        r_budget = prob_q.trace_bound - float(np.trace(emb_q.pinned["lyap_cap"]))
        try:
            used = float(np.trace(spd_inverse(q_out)))
        except NumericalError:
            break
        at_cap = r_budget >= (g.dim / q_floor) * 0.999
        if used < _R_BUDGET_CONTACT * r_budget or at_cap:
            break
        margin *= 2.0
    return q_out


def mstep_with_report(
    estep_result: EStepResult,
    params_prev: ModelParams,
    cfg: MStepConfig | None = None,
) -> tuple[ModelParams, MStepReport]:
    """One M-step: refit transition/initial, then per-state dynamics.

    States whose posterior mass falls below activity_floor_rel times the
    total frame count keep their previous dynamics bit-identically. Solver
    failures degrade to parameter retention per state and never abort.
    """
    if cfg is None:
        cfg = MStepConfig()
    k = params_prev.n_states
    gammas = list(estep_result.gamma_blocks())
    xis = list(estep_result.xi_blocks())
    trans = update_transition(gammas, xis, floor=cfg.trans_floor)
    pi = update_initial(gammas)
    mus = np.stack([g.mu for g in params_prev.gaussians])
    css = center_stats(estep_result.stats, mus)
    total_frames = float(sum(estep_result.lengths))
    floor_w = cfg.activity_floor_rel * total_frames

    sur_before = np.empty(k)
    sur_after = np.empty(k)
    active = np.zeros(k, dtype=bool)
    retained_a = np.zeros(k, dtype=bool)
    retained_q = np.zeros(k, dtype=bool)
    new_dyn: list[StateDynamics | None] = [None] * k

    def work(s: int) -> None:
        cs = css[s]
        dyn, g = params_prev.dynamics[s], params_prev.gaussians[s]
        try:
            sur_before[s] = dynamics_surrogate(cs, dyn.a, dyn.q)
        except NumericalError:
            sur_before[s] = np.inf
        if cs.w < floor_w:
            new_dyn[s] = dyn
            sur_after[s] = sur_before[s]
            return
        active[s] = True
        if cfg.constrained:
            a_new, q_new = _solve_state(cs, dyn, g, cfg)
        else:
            a_new, q_new = unconstrained_dynamics(
                cs, rel_floor(g.sigma, cfg.q_floor_rel)
            )
        retained_a[s] = bool(np.array_equal(a_new, dyn.a))
        retained_q[s] = bool(np.array_equal(q_new, dyn.q))
        b_new = shift_from_mean(a_new, g.mu)
        new_dyn[s] = StateDynamics(a=a_new, b=b_new, q=q_new)
        sur_after[s] = dynamics_surrogate(cs, a_new, q_new)

    if cfg.threads > 1 and k > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(work, range(k)))
    else:
        for s in range(k):
            work(s)

    params = ModelParams(
        n_states=k,
        dim=params_prev.dim,
        trans=trans,
        pi=pi,
        dynamics=tuple(new_dyn),
        gaussians=params_prev.gaussians,
    )
    report = MStepReport(
        surrogate_before=sur_before,
        surrogate_after=sur_after,
        active=active,
        retained_a=retained_a,
        retained_q=retained_q,
    )
    return params, report


def mstep(
    estep_result: EStepResult,
    params_prev: ModelParams,
    cfg: MStepConfig | None = None,
) -> ModelParams:
    """One M-step returning just the updated parameters."""
    params, _ = mstep_with_report(estep_result, params_prev, cfg)
    return params
