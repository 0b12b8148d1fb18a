"""First-order solver for convex programs over trace-bounded PSD matrices.

The pipeline: a convex program (objective h, convex inequalities f_i <= 0,
affine equalities g_j = 0, trace bound R) is rescaled onto the trace-1
spectrahedron with one slack dimension; constraint satisfaction is smoothed
into the log-sum-exp penalty

    Phi(X) = (1/M) log( sum_i exp(M f_i(X)) + sum_j exp(M g_j(X)^2) )

whose sub-epsilon level set certifies approximate feasibility when
M = log(n+m)/eps (the smoothed max overshoots the true max by at most
log(n+m)/M); Phi is minimized by a Frank-Wolfe loop whose linear subproblem
is an extreme-eigenvector computation; and an outer step-doubling search
turns the feasibility oracle into a constrained minimizer of h by repeatedly
asking for feasible points with h below a shrinking bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError
from .linalg import chol_logdet, chol_lower, golden_section_min, spd_inverse, symmetrize

# ---------------------------------------------------------------------------
# Functionals on symmetric matrices
# ---------------------------------------------------------------------------


class MatrixFunctional:
    """Differentiable convex functional of a symmetric matrix.

    Subclasses provide value() and gradient(); gradient is taken with respect
    to the full matrix and symmetrized by consumers. line(x, v) returns a
    callable evaluating the functional along the Frank-Wolfe segment
    (1-gamma)x + gamma*v; the default re-evaluates at the mixed point.
    """

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_and_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.value(x), symmetrize(self.gradient(x))

    def line(self, x: np.ndarray, v: np.ndarray) -> Callable[[float], float]:
        return lambda gamma: self.value((1.0 - gamma) * x + gamma * v)


@dataclass(frozen=True)
class LinearFunctional(MatrixFunctional):
    """f(X) = <G, X> + c."""

    g: np.ndarray
    c: float = 0.0

    def value(self, x: np.ndarray) -> float:
        return float(np.sum(self.g * x)) + self.c

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.g

    def line(self, x: np.ndarray, v: np.ndarray) -> Callable[[float], float]:
        a0 = self.value(x)
        a1 = self.value(v)
        return lambda gamma: (1.0 - gamma) * a0 + gamma * a1


@dataclass(frozen=True)
class QuadraticBlockObjective(MatrixFunctional):
    """Tr[ qinv (A etil A^T - btil A^T - A btil^T) ] with A read from X.

    A is the average of the entry blocks listed in `copies`, each a
    (row_start, col_start) corner of a dim x dim block. Convex in X because
    etil is PSD and qinv is PD.
    """

    qinv: np.ndarray
    btil: np.ndarray
    etil: np.ndarray
    copies: tuple[tuple[int, int], ...]
    dim: int

    def _read(self, x: np.ndarray) -> np.ndarray:
        d = self.dim
        acc = np.zeros((d, d))
        for r0, c0 in self.copies:
            acc += x[r0 : r0 + d, c0 : c0 + d]
        return acc / len(self.copies)

    def value_at(self, a: np.ndarray) -> float:
        term = a @ self.etil @ a.T - self.btil @ a.T - a @ self.btil.T
        return float(np.sum(self.qinv * term))

    def value(self, x: np.ndarray) -> float:
        return self.value_at(self._read(x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        a = self._read(x)
        grad_a = 2.0 * self.qinv @ (a @ self.etil - self.btil)
        out = np.zeros_like(x)
        d = self.dim
        share = grad_a / len(self.copies)
        for r0, c0 in self.copies:
            out[r0 : r0 + d, c0 : c0 + d] += share
        return out

    def line(self, x: np.ndarray, v: np.ndarray) -> Callable[[float], float]:
        # The objective is an exact quadratic along the segment; fit it from
        # three evaluations of the cheap d x d form.
        ax, av = self._read(x), self._read(v)
        f0 = self.value_at(ax)
        f1 = self.value_at(av)
        fh = self.value_at(0.5 * (ax + av))
        # f(g) = f0 + b g + a g^2 with f(1/2), f(1) known
        quad_a = 2.0 * f1 + 2.0 * f0 - 4.0 * fh
        quad_b = f1 - f0 - quad_a
        return lambda gamma: f0 + quad_b * gamma + quad_a * gamma * gamma


@dataclass(frozen=True)
class LogDetBlockObjective(MatrixFunctional):
    """-g_scale * logdet(R) + Tr(R F) with R read from a diagonal block of X.

    Returns +inf when the block is not positive definite, which line searches
    treat as an automatic rejection.
    """

    g_scale: float
    f_mat: np.ndarray
    corner: int
    dim: int

    def _read(self, x: np.ndarray) -> np.ndarray:
        r0, d = self.corner, self.dim
        return symmetrize(x[r0 : r0 + d, r0 : r0 + d])

    def value_at(self, r: np.ndarray) -> float:
        try:
            chol = np.linalg.cholesky(r)
        except np.linalg.LinAlgError:
            return math.inf
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return -self.g_scale * logdet + float(np.sum(r * self.f_mat))

    def value(self, x: np.ndarray) -> float:
        return self.value_at(self._read(x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        r = self._read(x)
        grad_r = -self.g_scale * spd_inverse(r) + self.f_mat
        out = np.zeros_like(x)
        r0, d = self.corner, self.dim
        out[r0 : r0 + d, r0 : r0 + d] = grad_r
        return out

    def line(self, x: np.ndarray, v: np.ndarray) -> Callable[[float], float]:
        # Along the segment R(g) = (1-g) Rx + g Rv the trace term is linear
        # and, whitening by whichever endpoint is positive definite,
        # logdet R(g) = logdet Ra + sum_i log(alpha + beta lam_i) with lam the
        # generalized eigenvalues of the other endpoint. That makes each line
        # evaluation O(dim) instead of a fresh Cholesky.
        rx, rv = self._read(x), self._read(v)
        tx = float(np.sum(rx * self.f_mat))
        tv = float(np.sum(rv * self.f_mat))
        g = self.g_scale
        for base, other, base_is_x in ((rx, rv, True), (rv, rx, False)):
            try:
                chol = np.linalg.cholesky(base)
            except np.linalg.LinAlgError:
                continue
            logdet_base = 2.0 * float(np.sum(np.log(np.diag(chol))))
            half = np.linalg.solve(chol, other)
            white = np.linalg.solve(chol, half.T)
            lam = np.clip(np.linalg.eigvalsh(symmetrize(white)), 0.0, None)

            def f(gamma: float, base_is_x=base_is_x, logdet_base=logdet_base, lam=lam) -> float:
                alpha = 1.0 - gamma if base_is_x else gamma
                beta = gamma if base_is_x else 1.0 - gamma
                terms = alpha + beta * lam
                if np.any(terms <= 0.0):
                    return math.inf
                logdet = logdet_base + float(np.sum(np.log(terms)))
                return -g * logdet + (1.0 - gamma) * tx + gamma * tv

            return f
        # Neither endpoint is positive definite; fall back to direct
        # evaluation (interior points may still be, e.g. mixing two
        # complementary singular matrices).
        return lambda gamma: self.value_at((1.0 - gamma) * rx + gamma * rv)


@dataclass(frozen=True)
class BoundedObjective(MatrixFunctional):
    """h(X) - bound, the objective-as-constraint used by the outer search."""

    base: MatrixFunctional
    bound: float

    def value(self, x: np.ndarray) -> float:
        return self.base.value(x) - self.bound

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.base.gradient(x)

    def line(self, x: np.ndarray, v: np.ndarray) -> Callable[[float], float]:
        inner = self.base.line(x, v)
        bound = self.bound
        return lambda gamma: inner(gamma) - bound


@dataclass(frozen=True)
class AffineConstraint:
    """weight * (sum_k coef_k X[i_k, j_k] - target) = 0.

    Entries reference one triangle only; the solver keeps X symmetric by
    construction so a single representative per mirrored pair suffices. The
    weight rescales the constraint inside the penalty: the certified residual
    |g| <= sqrt(eps) applies to the weighted value, so larger weights tighten
    the underlying entries.
    """

    entries: tuple[tuple[int, int, float], ...]
    target: float
    weight: float = 1.0

    def value(self, x: np.ndarray) -> float:
        s = sum(c * x[i, j] for i, j, c in self.entries)
        return self.weight * (s - self.target)

    def raw_value(self, x: np.ndarray) -> float:
        return self.value(x) / self.weight


# ---------------------------------------------------------------------------
# Problem container and embedding descriptor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockEmbedding:
    """Names the index ranges of model matrices inside the solver variable.

    blocks maps a name to (row_start, col_start, n_rows, n_cols); `free`
    lists the names whose entries are decision values (everything else is
    pinned by equality constraints).
    """

    dim: int
    blocks: dict[str, tuple[int, int, int, int]]
    free: tuple[str, ...]

    def read(self, x: np.ndarray, name: str) -> np.ndarray:
        r0, c0, nr, nc = self.blocks[name]
        return x[r0 : r0 + nr, c0 : c0 + nc]


@dataclass(frozen=True)
class ConvexProblem:
    """A convex program over symmetric PSD X with trace(X) <= trace_bound."""

    dim: int
    objective: MatrixFunctional | None
    ineq_constraints: tuple[MatrixFunctional, ...]
    eq_constraints: tuple[AffineConstraint, ...]
    trace_bound: float
    layout: BlockEmbedding | None = None

    def __post_init__(self):
        if self.trace_bound <= 0:
            raise ValueError("trace_bound must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def n_constraints(self) -> int:
        return len(self.ineq_constraints) + len(self.eq_constraints)


@dataclass(frozen=True)
class SolverConfig:
    """Tunable knobs for the penalty/Frank-Wolfe/search pipeline."""

    eps: float = 1e-3
    max_fw_steps: int = 500
    ev_iters: int = 200
    ev_shift: tuple[float, ...] = (1.0, 10.0, 100.0)
    ev_tol: float = 1e-8
    linesearch_tol: float = 1e-6
    step_cap: float = 1e12  # outer-search step-size ceiling
    max_probes: int = 200  # outer-search solve budget
    probe_fw_steps: int | None = None  # step cap for descent probes (None: max_fw_steps)
    futility_window: int | None = None  # probe early-out when the target is out of reach
    polish: bool = True  # final bound-constrained re-solve to stationarity
    polish_gap: float | None = None  # gap exit for the polish (default eps/100)
    polish_rounds: int = 1  # restarts of the polish from the cleaned incumbent
    check_iterates: bool = False  # debug: assert PSD/trace invariants per step

    def __post_init__(self):
        if self.eps <= 0 or self.max_fw_steps < 1:
            raise ValueError("eps must be positive and max_fw_steps >= 1")


def penalty_sharpness(n_constraints: int, eps: float) -> float:
    """M such that the smoothed max overshoots the true max by at most eps.

    The log-sum-exp of L terms is sandwiched between the max and the max plus
    log(L)/M; M = log(L)/eps makes the overshoot exactly eps. A single
    constraint never overshoots, so L is floored at 2 to keep M positive.
    """
    return math.log(max(n_constraints, 2)) / eps


# ---------------------------------------------------------------------------
# Compiled penalty
# ---------------------------------------------------------------------------


class PenaltyFunction:
    """Phi for one problem instance, with fast paths for affine terms.

    Equality constraints are compiled to padded index/coefficient arrays so a
    single fancy-indexing pass evaluates all of them; linear inequalities are
    stacked into one tensor; other functionals (the bounded objective) are
    evaluated through their own methods.
    """

    def __init__(
        self,
        dim: int,
        ineqs: Sequence[MatrixFunctional],
        eqs: Sequence[AffineConstraint],
        eps: float,
    ):
        if not ineqs and not eqs:
            raise ValueError("penalty needs at least one constraint")
        self.dim = dim
        self.eps = eps
        self.m_sharp = penalty_sharpness(len(ineqs) + len(eqs), eps)
        # Equality exponentials satisfy exp(M g^2) >= 1, so with m of them
        # Phi can never drop below log(m)/M even at exact feasibility; this
        # structural floor offsets the search's success threshold.
        self.eq_floor = math.log(max(len(eqs), 1)) / self.m_sharp

        self.linear: list[LinearFunctional] = []
        self.general: list[MatrixFunctional] = []
        for f in ineqs:
            (self.linear if isinstance(f, LinearFunctional) else self.general).append(f)
        if self.linear:
            self.lin_g = np.stack([f.g for f in self.linear])
            self.lin_c = np.array([f.c for f in self.linear])
        else:
            self.lin_g = np.zeros((0, dim, dim))
            self.lin_c = np.zeros(0)

        self.eqs = tuple(eqs)
        m = len(eqs)
        kmax = max((len(e.entries) for e in eqs), default=1)
        self.eq_rows = np.zeros((m, kmax), dtype=np.int64)
        self.eq_cols = np.zeros((m, kmax), dtype=np.int64)
        self.eq_coef = np.zeros((m, kmax))
        self.eq_target = np.zeros(m)
        for j, e in enumerate(eqs):
            for k, (i, jj, c) in enumerate(e.entries):
                self.eq_rows[j, k] = i
                self.eq_cols[j, k] = jj
                self.eq_coef[j, k] = c * e.weight
            self.eq_target[j] = e.target * e.weight

    # -- raw constraint values ------------------------------------------------

    def ineq_values(self, x: np.ndarray) -> np.ndarray:
        vals = []
        if len(self.linear):
            vals.append(np.einsum("kij,ij->k", self.lin_g, x) + self.lin_c)
        if self.general:
            vals.append(np.array([f.value(x) for f in self.general]))
        if not vals:
            return np.zeros(0)
        return np.concatenate(vals)

    def eq_values(self, x: np.ndarray) -> np.ndarray:
        if not self.eqs:
            return np.zeros(0)
        picked = x[self.eq_rows, self.eq_cols]
        return np.einsum("jk,jk->j", picked, self.eq_coef) - self.eq_target

    # -- penalty value / gradient --------------------------------------------

    def _terms(self, fv: np.ndarray, gv: np.ndarray) -> np.ndarray:
        return np.concatenate((self.m_sharp * fv, self.m_sharp * gv * gv))

    def value(self, x: np.ndarray) -> float:
        terms = self._terms(self.ineq_values(x), self.eq_values(x))
        t = float(np.max(terms))
        if not math.isfinite(t):
            return math.inf
        return (t + math.log(float(np.sum(np.exp(terms - t))))) / self.m_sharp

    def value_and_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        fv = self.ineq_values(x)
        gv = self.eq_values(x)
        terms = self._terms(fv, gv)
        t = float(np.max(terms))
        if not math.isfinite(t):
            raise NumericalError("penalty gradient requested at an infinite-value point")
        w = np.exp(terms - t)
        denom = float(np.sum(w))
        wf, wg = w[: len(fv)], w[len(fv) :]

        grad = np.zeros((self.dim, self.dim))
        n_lin = len(self.linear)
        if n_lin:
            grad += np.tensordot(wf[:n_lin], self.lin_g, axes=1)
        for fweight, f in zip(wf[n_lin:], self.general):
            if fweight > 0.0:
                grad += fweight * f.gradient(x)
        if len(gv):
            contrib = (2.0 * wg * gv)[:, None] * self.eq_coef
            np.add.at(grad, (self.eq_rows.ravel(), self.eq_cols.ravel()), contrib.ravel())
        grad /= denom
        value = (t + math.log(denom)) / self.m_sharp
        return value, symmetrize(grad)

    def line(self, x: np.ndarray, v: np.ndarray) -> Callable[[float], float]:
        """Phi restricted to the segment (1-gamma)x + gamma v, evaluated
        through per-functional 1-D restrictions (exact for affine terms)."""
        fx_lin = np.einsum("kij,ij->k", self.lin_g, x) + self.lin_c if len(self.linear) else np.zeros(0)
        fv_lin = np.einsum("kij,ij->k", self.lin_g, v) + self.lin_c if len(self.linear) else np.zeros(0)
        gx = self.eq_values(x)
        gv = self.eq_values(v)
        gen_lines = [f.line(x, v) for f in self.general]
        m = self.m_sharp

        def phi(gamma: float) -> float:
            fvals = (1.0 - gamma) * fx_lin + gamma * fv_lin
            gvals = (1.0 - gamma) * gx + gamma * gv
            parts = [m * fvals, m * gvals * gvals]
            if gen_lines:
                parts.append(np.array([m * g(gamma) for g in gen_lines]))
            terms = np.concatenate(parts)
            t = float(np.max(terms))
            if not math.isfinite(t):
                return math.inf
            return (t + math.log(float(np.sum(np.exp(terms - t))))) / m

        return phi

    def max_violation(self, x: np.ndarray) -> float:
        """max over f_i(X) and g_j(X)^2 — the quantity Phi smooths."""
        fv = self.ineq_values(x)
        gv = self.eq_values(x)
        cands = [-math.inf]
        if len(fv):
            cands.append(float(np.max(fv)))
        if len(gv):
            cands.append(float(np.max(gv * gv)))
        return max(cands)


def penalty(prob: ConvexProblem, m_sharp: float, x: np.ndarray) -> float:
    """Phi(X) for an explicit sharpness M (diagnostic / testing entry point)."""
    pen = PenaltyFunction(prob.dim, prob.ineq_constraints, prob.eq_constraints, eps=1.0)
    pen.m_sharp = m_sharp
    return pen.value(x)


def penalty_gradient(prob: ConvexProblem, m_sharp: float, x: np.ndarray) -> np.ndarray:
    pen = PenaltyFunction(prob.dim, prob.ineq_constraints, prob.eq_constraints, eps=1.0)
    pen.m_sharp = m_sharp
    return pen.value_and_gradient(x)[1]


def penalty_bounds_check(prob: ConvexProblem, eps: float, x: np.ndarray) -> tuple[float, float]:
    """(Phi(X), max violation) at the sharpness M = log(n+m)/eps.

    Contract (the smoothed-max sandwich): Phi <= eps implies every f_i <= eps
    and every g_j^2 <= eps; conversely max violation <= eps implies
    Phi <= 2 eps.
    """
    pen = PenaltyFunction(prob.dim, prob.ineq_constraints, prob.eq_constraints, eps)
    return pen.value(x), pen.max_violation(x)


# ---------------------------------------------------------------------------
# Rescaling onto the trace-1 spectrahedron
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _EmbeddedFunctional(MatrixFunctional):
    """base evaluated at R * Y[:n,:n] for the lifted variable Y."""

    base: MatrixFunctional
    scale: float
    n: int

    def _pull(self, y: np.ndarray) -> np.ndarray:
        return self.scale * y[: self.n, : self.n]

    def value(self, y: np.ndarray) -> float:
        return self.base.value(self._pull(y))

    def gradient(self, y: np.ndarray) -> np.ndarray:
        out = np.zeros_like(y)
        out[: self.n, : self.n] = self.scale * self.base.gradient(self._pull(y))
        return out

    def line(self, y: np.ndarray, v: np.ndarray) -> Callable[[float], float]:
        # The pull-back is linear, so segment mixing commutes with it.
        return self.base.line(self._pull(y), self._pull(v))


@dataclass(frozen=True)
class RescaledProblem:
    """A problem rewritten over trace-1 PSD matrices of side dim+1."""

    problem: ConvexProblem  # lifted problem, trace_bound == 1
    scale: float
    base_dim: int

    def embed(self, x: np.ndarray) -> np.ndarray:
        n = self.base_dim
        y = np.zeros((n + 1, n + 1))
        y[:n, :n] = x / self.scale
        # Problems whose equality pins force trace(x) == trace_bound leave
        # zero slack; clamp away the negative rounding dust.
        y[n, n] = max(0.0, 1.0 - float(np.trace(x)) / self.scale)
        return y

    def extract(self, y: np.ndarray) -> np.ndarray:
        return self.scale * y[: self.base_dim, : self.base_dim]


def rescale(prob: ConvexProblem) -> RescaledProblem:
    """Change variables so the feasible set becomes {Y >= 0, tr(Y) = 1}.

    X = R * Y[:N, :N]; the extra diagonal entry absorbs the trace slack
    R - tr(X). Affine and linear functionals are rewritten in closed form;
    other functionals are wrapped.
    """
    n, r = prob.dim, prob.trace_bound

    def lift_func(f: MatrixFunctional) -> MatrixFunctional:
        if isinstance(f, LinearFunctional):
            g = np.zeros((n + 1, n + 1))
            g[:n, :n] = r * f.g
            return LinearFunctional(g, f.c)
        return _EmbeddedFunctional(f, r, n)

    eqs = tuple(
        AffineConstraint(
            entries=tuple((i, j, c * r) for i, j, c in e.entries),
            target=e.target,
            weight=e.weight,
        )
        for e in prob.eq_constraints
    )
    lifted = ConvexProblem(
        dim=n + 1,
        objective=lift_func(prob.objective) if prob.objective is not None else None,
        ineq_constraints=tuple(lift_func(f) for f in prob.ineq_constraints),
        eq_constraints=eqs,
        trace_bound=1.0,
        layout=prob.layout,
    )
    return RescaledProblem(problem=lifted, scale=r, base_dim=n)


# ---------------------------------------------------------------------------
# Extreme eigenvector
# ---------------------------------------------------------------------------

_EV_SEED = 0x51AC


def _ev_start(n: int) -> np.ndarray:
    v = np.random.Generator(np.random.PCG64(_EV_SEED)).standard_normal(n)
    return v / float(np.linalg.norm(v))


def approx_ev(s: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Unit vector approximating the most-positive eigenvector of symmetric s.

    Power iteration on s shifted upward by multiples of the infinity norm
    (the shift makes the spectrum nonnegative so the dominant eigenvalue of
    the shifted matrix corresponds to the top of s); accepted when the
    Rayleigh residual is small, otherwise escalate the shift and finally fall
    back to a dense symmetric eigendecomposition.
    """
    n = s.shape[0]
    norm_inf = float(np.max(np.sum(np.abs(s), axis=1)))
    start = _ev_start(n)
    if norm_inf == 0.0:
        return start
    if n <= 32:
        # For small matrices the dense path is exact and faster than the
        # iteration; it trivially meets the residual acceptance test.
        vals, vecs = np.linalg.eigh(s)
        return vecs[:, -1]
    accept = cfg.ev_tol * max(1.0, norm_inf)
    for mult in cfg.ev_shift:
        shift = mult * norm_inf
        b = s + shift * np.eye(n)
        v = start
        for it in range(cfg.ev_iters):
            w = b @ v
            nw = float(np.linalg.norm(w))
            if nw <= 1e-300:
                break
            v = w / nw
            if it % 8 == 7 or it == cfg.ev_iters - 1:
                sv = s @ v
                mu = float(v @ sv)
                if float(np.linalg.norm(sv - mu * v)) <= accept:
                    return v
    vals, vecs = np.linalg.eigh(s)
    return vecs[:, -1]


# ---------------------------------------------------------------------------
# Frank-Wolfe
# ---------------------------------------------------------------------------


@dataclass
class FWResult:
    x: np.ndarray
    value: float
    gap: float
    steps: int
    hit_target: bool
    certified_infeasible: bool


def default_start(dim: int) -> np.ndarray:
    """Deterministic strictly interior start: uniform spectrum I/dim."""
    return np.eye(dim) / dim


def frank_wolfe(
    phi,
    dim: int,
    cfg: SolverConfig,
    x0: np.ndarray | None = None,
    target: float | None = None,
    infeasible_above: float | None = None,
    gap_tol: float | None = None,
    on_iterate: Callable[[int, float, float, float], None] | None = None,
) -> FWResult:
    """Minimize a convex functional over {X >= 0, tr(X) = 1}.

    phi must provide value(X), value_and_gradient(X), and line(X, V); each
    step moves toward the rank-one extreme point given by the most-negative
    gradient eigenvector, with a golden-section line search that never accepts
    an increase. Stops at the step cap, when the duality gap drops below
    gap_tol (default eps/10), when value <= target (feasibility short-cut), or
    when value - gap certifies the minimum stays above infeasible_above.
    """
    x = default_start(dim) if x0 is None else symmetrize(np.array(x0, dtype=np.float64))
    gap_exit = cfg.eps / 10.0 if gap_tol is None else gap_tol
    value = phi.value(x)
    gap = math.inf
    hit_target = False
    certified = False
    steps = 0
    window = cfg.futility_window
    recent: list[float] = []
    for k in range(cfg.max_fw_steps):
        if target is not None and value <= target:
            hit_target = True
            break
        if window is not None and target is not None:
            # Futility early-out: per-step progress of a convex Frank-Wolfe
            # run only slows down, so extrapolating the recent decrease bounds
            # what the remaining budget can deliver. Callers that treat a
            # missed target as failure lose nothing but the wasted steps.
            recent.append(value)
            if len(recent) > window:
                recent.pop(0)
                made = recent[0] - value
                left = cfg.max_fw_steps - k
                if made * (left / window) < value - target:
                    break
        value, grad = phi.value_and_gradient(x)
        if cfg.check_iterates:
            assert float(np.min(np.linalg.eigvalsh(x))) >= -1e-10
            assert abs(float(np.trace(x)) - 1.0) <= 1e-12
        v = approx_ev(-grad, cfg)
        gv = grad @ v
        mu = float(v @ gv)
        resid = float(np.linalg.norm(gv - mu * v))
        gap = float(np.sum(grad * x)) - mu
        if target is not None and value <= target:
            hit_target = True
            break
        if gap <= gap_exit:
            break
        if infeasible_above is not None and value - gap - resid > infeasible_above:
            certified = True
            break
        atom = np.outer(v, v)
        phi_line = phi.line(x, atom)
        gamma, line_val = golden_section_min(phi_line, 0.0, 1.0, cfg.linesearch_tol)
        fallback = 2.0 / (k + 2.0)
        fb_val = phi_line(fallback)
        if fb_val < line_val:
            gamma, line_val = fallback, fb_val
        if not line_val < value:  # no strict improvement: keep X (gamma = 0)
            gamma = 0.0
            line_val = value
        if on_iterate is not None:
            on_iterate(k, value, gap, gamma)
        if gamma == 0.0:
            steps = k + 1
            break
        x = symmetrize((1.0 - gamma) * x + gamma * atom)
        value = line_val
        steps = k + 1
    # Refresh the exact value at the final iterate (line values accumulate
    # segment-mixing round-off).
    final_value = phi.value(x)
    if not math.isfinite(final_value):
        raise NumericalError("Frank-Wolfe reached a non-finite penalty value")
    if target is not None and final_value <= target:
        hit_target = True
    return FWResult(
        x=x, value=final_value, gap=gap, steps=steps,
        hit_target=hit_target, certified_infeasible=certified,
    )


# ---------------------------------------------------------------------------
# Outer search: feasibility, then objective descent by step-doubling
# ---------------------------------------------------------------------------


@dataclass
class FeasibilityResult:
    success: bool
    x: np.ndarray | None  # in original (pre-rescale) coordinates
    objective: float
    probes: int
    step_cap_hit: bool = False


def _make_penalty(
    rescaled: RescaledProblem,
    cfg: SolverConfig,
    obj_bound: float | None,
) -> PenaltyFunction:
    prob = rescaled.problem
    ineqs = list(prob.ineq_constraints)
    if obj_bound is not None:
        if prob.objective is None:
            raise ValueError("objective bound requested for a problem without objective")
        ineqs.append(BoundedObjective(prob.objective, obj_bound))
    return PenaltyFunction(prob.dim, ineqs, prob.eq_constraints, cfg.eps)




def feasibility_search(
    prob: ConvexProblem,
    cfg: SolverConfig,
    x0: np.ndarray | None = None,
    reproject: Callable[[np.ndarray], np.ndarray] | None = None,
) -> FeasibilityResult:
    """Constrained minimization through repeated feasibility solves.

    First solves the pure-constraint penalty; failure to reach Phi < eps is a
    Fail. Then, with U the incumbent objective value, repeatedly asks for a
    feasible point with objective <= U - step: on success the incumbent moves
    and the step doubles, on failure the step halves; the search stops when
    the step falls below eps (below that the penalty cannot distinguish the
    ask from the incumbent, so smaller steps are vacuous). A final polish
    re-solve at the settled bound
    (without the feasibility short-cut) lets the free coordinates reach the
    penalty's stationary point, which tracks the constrained optimum.

    reproject, when given, maps an extracted X back onto the exactly-feasible
    manifold; it cleans warm starts between probes and the final iterate, so
    the reported objective belongs to an exactly-feasible point instead of
    one spending its certified equality slack (which Lemma-style smoothing
    only bounds by sqrt(eps)) on the objective. Without it the search follows
    the penalized problem verbatim and inherits that sqrt(eps) window.
    """
    rescaled = rescale(prob)
    eps = cfg.eps
    y_start = None
    if x0 is not None:
        y_start = rescaled.embed(x0)
        if float(np.trace(x0)) > prob.trace_bound * (1.0 + 1e-9):
            raise ValueError("warm start exceeds the trace bound")

    pen0 = _make_penalty(rescaled, cfg, obj_bound=None)
    feas0 = eps + pen0.eq_floor
    # The pure stage must not give up early: a missed target here is reported
    # as outright infeasibility, so it gets the full step budget.
    pure_cfg = cfg if cfg.futility_window is None else replace(cfg, futility_window=None)
    res = frank_wolfe(pen0, rescaled.problem.dim, pure_cfg, x0=y_start, target=feas0)
    probes = 1
    if res.value >= feas0:
        return FeasibilityResult(success=False, x=None, objective=math.nan, probes=probes)
    if prob.objective is None:
        return FeasibilityResult(
            success=True, x=rescaled.extract(res.x), objective=math.nan, probes=probes
        )

    def clean(y: np.ndarray) -> np.ndarray:
        if reproject is None:
            return y
        return rescaled.embed(reproject(rescaled.extract(y)))

    y = clean(res.x)
    u = prob.objective.value(rescaled.extract(y))
    step = 1.0
    step_cap_hit = False
    # Probes do not need full convergence: successes exit through the target
    # short-cut and slow-converging probes are indistinguishable from
    # infeasible ones (halving is the right reaction to both), so a tighter
    # step cap trades nothing but schedule noise for time.
    probe_cfg = cfg if cfg.probe_fw_steps is None else replace(cfg, max_fw_steps=cfg.probe_fw_steps)
    while step >= eps and probes < cfg.max_probes:
        pen = _make_penalty(rescaled, cfg, obj_bound=u - step)
        feas = eps + pen.eq_floor
        trial = frank_wolfe(
            pen, rescaled.problem.dim, probe_cfg, x0=y, target=feas, infeasible_above=feas
        )
        probes += 1
        if trial.value < feas:
            y_new = clean(trial.x)
            u_new = prob.objective.value(rescaled.extract(y_new))
            improvement = u - u_new
            if u_new <= u:
                y = y_new
                u = u_new
            # Without cleaning u_new = h(trial) <= u - step, so the step
            # always doubles (the verbatim schedule). A cleaning map that
            # gives back most of the probe's gain means the search has hit
            # the cleaning resolution; halving then lets it settle.
            if improvement >= 0.5 * step:
                step *= 2.0
                if step > cfg.step_cap:
                    step = cfg.step_cap
                    if step_cap_hit:
                        break  # unbounded descent guard: cap reached twice
                    step_cap_hit = True
            else:
                step *= 0.5
        else:
            step *= 0.5

    if cfg.polish:
        gap_tol = cfg.polish_gap if cfg.polish_gap is not None else eps / 100.0
        # Restarting from the cleaned incumbent breaks the late-stage
        # atom-mixing crawl (tiny corrections to a pinned iterate need tiny
        # mixing weights); rounds stop as soon as one fails to improve.
        for _ in range(max(cfg.polish_rounds, 1)):
            pen = _make_penalty(rescaled, cfg, obj_bound=u)
            polished = frank_wolfe(pen, rescaled.problem.dim, cfg, x0=y, gap_tol=gap_tol)
            probes += 1
            if polished.value >= eps + pen.eq_floor:
                break
            if reproject is None:
                y = polished.x
                u_new = prob.objective.value(rescaled.extract(y))
                if not u_new < u:
                    u = min(u, u_new)
                    break
                u = u_new
            else:
                # Accept the polished point only if it still wins after being
                # cleaned back onto the feasible manifold.
                cand = clean(polished.x)
                u_new = prob.objective.value(rescaled.extract(cand))
                if u_new > u:
                    break
                y = cand
                improved = u_new < u
                u = u_new
                if not improved:
                    break
    x_out = rescaled.extract(y)
    return FeasibilityResult(
        success=True,
        x=x_out,
        objective=prob.objective.value(x_out),
        probes=probes,
        step_cap_hit=step_cap_hit,
    )
