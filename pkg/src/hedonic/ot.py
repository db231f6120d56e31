"""Discrete Monge-Kantorovich solver with dual potentials.

`solve_exact` maximizes total surplus over couplings with fixed
marginals and returns both the optimal plan and a feasible,
complementary-slack dual pair.  Uniform instances whose sizes divide
dispatch to a linear-assignment routine (after target replication when
sizes differ); everything else goes through an LP.  Dual potentials for
assignment-based plans are rebuilt from the plan support by a
longest-chain propagation, which yields machine-precision feasibility
and slackness; LP duals are polished by a double surplus-transform.

`solve_entropic` is the fast approximate path: log-domain scaling
iterations with an epsilon-halving schedule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import csr_matrix
from scipy.special import logsumexp

from .measures import DiscreteMeasure
from .surplus import SurplusFamily

__all__ = [
    "TransportPlan",
    "DualPair",
    "EntropicResult",
    "MonotonicityReport",
    "surplus_matrix",
    "solve_exact",
    "solve_entropic",
    "barycentric_projection",
    "check_cyclical_monotonicity",
    "write_plan_csv",
    "read_plan_coupling",
    "write_duals_csv",
    "read_duals_csv",
]

# Mass below this is treated as numerically zero when a plan is sparsified.
SPARSITY_THRESHOLD = 1e-12
# Replicated assignment instances are capped at this side length.
_MAX_ASSIGNMENT_SIZE = 4096


@dataclass(frozen=True)
class TransportPlan:
    """Feasible coupling between two discrete measures and its surplus."""

    coupling: np.ndarray
    objective: float

    def __post_init__(self):
        c = np.array(self.coupling, dtype=float, copy=True)
        if c.ndim != 2:
            raise ValueError("coupling must be a matrix")
        if np.any(c < -1e-15):
            raise ValueError("coupling must be nonnegative")
        c[c < 0] = 0.0
        c.setflags(write=False)
        object.__setattr__(self, "coupling", c)
        object.__setattr__(self, "objective", float(self.objective))

    @property
    def shape(self):
        return self.coupling.shape

    def support(self, threshold: float = SPARSITY_THRESHOLD):
        """Indices (i, j) and masses of entries above threshold."""
        ii, jj = np.nonzero(self.coupling > threshold)
        return ii, jj, self.coupling[ii, jj]

    def marginal_error(self, mu: np.ndarray, nu: np.ndarray) -> float:
        """L-infinity violation of the marginal constraints."""
        row = np.abs(self.coupling.sum(axis=1) - mu).max()
        col = np.abs(self.coupling.sum(axis=0) - nu).max()
        return float(max(row, col))

    def validate(self, mu, nu, surplus, tol: float = 1e-9) -> None:
        if self.marginal_error(np.asarray(mu), np.asarray(nu)) > tol:
            raise ValueError("coupling marginals violate the measure weights")
        if abs(float(np.sum(self.coupling * surplus)) - self.objective) > max(
            tol, tol * abs(self.objective)
        ):
            raise ValueError("stored objective disagrees with the coupling")


@dataclass(frozen=True)
class DualPair:
    """Feasible dual potentials; v_target is pinned to 0 at `normalization`."""

    w_source: np.ndarray
    v_target: np.ndarray
    normalization: int

    def __post_init__(self):
        w = np.array(self.w_source, dtype=float, copy=True).ravel()
        v = np.array(self.v_target, dtype=float, copy=True).ravel()
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "w_source", w)
        object.__setattr__(self, "v_target", v)
        object.__setattr__(self, "normalization", int(self.normalization))

    def objective(self, mu: np.ndarray, nu: np.ndarray) -> float:
        return float(mu @ self.w_source + nu @ self.v_target)

    def feasibility_margin(self, surplus: np.ndarray) -> float:
        """min over pairs of (w_i + v_j - S_ij); >= 0 means feasible."""
        return float(
            (self.w_source[:, None] + self.v_target[None, :] - surplus).min()
        )

    def slackness_error(self, plan: TransportPlan, surplus: np.ndarray) -> float:
        ii, jj, _ = plan.support()
        if ii.size == 0:
            return 0.0
        gap = self.w_source[ii] + self.v_target[jj] - surplus[ii, jj]
        return float(np.abs(gap).max())


@dataclass(frozen=True)
class EntropicResult:
    plan: TransportPlan
    duals: DualPair
    iterations: int
    converged: bool
    marginal_error_l1: float


def surplus_matrix(
    mu: DiscreteMeasure, nu: DiscreteMeasure, f: SurplusFamily, x=None
) -> np.ndarray:
    """Entry (i, j) = zeta(x, source_i, target_j); must be finite."""
    if x is None:
        x = np.zeros(f.d_x)
    s = f.pairwise(x, mu.points, nu.points)
    if not np.all(np.isfinite(s)):
        raise ValueError("surplus matrix contains non-finite values")
    return s


def _lexicographic_ref(points: np.ndarray) -> int:
    """Index of the lexicographically smallest point."""
    return int(np.lexsort(points.T[::-1])[0])


def _pin(w: np.ndarray, v: np.ndarray, ref: int):
    shift = v[ref]
    return w + shift, v - shift


def _duals_from_support(
    surplus: np.ndarray,
    ii: np.ndarray,
    jj: np.ndarray,
    nu: np.ndarray,
    ref: int,
):
    """Rebuild dual potentials from an optimal plan's support.

    Propagates v over targets through chains of support pairs:
    v_k >= v_j + S(i, k) - S(i, j) for every support pair (i, j) and
    every target k.  On an optimal (cyclically monotone) plan the
    longest-chain values are finite and the resulting pair is feasible
    with equality on the support, both to machine precision.
    """
    m = surplus.shape[1]
    v = np.full(m, -np.inf)
    v[ref] = 0.0
    rows = surplus[ii, :]  # (n_support, m)
    for _ in range(m + 1):
        base = v[jj] - surplus[ii, jj]
        finite = np.isfinite(base)
        if not np.any(finite):
            break
        cand = (base[finite, None] + rows[finite]).max(axis=0)
        new_v = np.maximum(v, cand)
        if np.array_equal(new_v, v):
            break
        v = new_v
    # Targets with zero mass may be unreachable through the support.
    unreachable = ~np.isfinite(v)
    if np.any(unreachable & (nu > 0)):
        raise RuntimeError("support chains failed to reach a positive-mass target")
    pos = np.isfinite(v)
    w = (surplus[:, pos] - v[pos][None, :]).max(axis=1)
    if np.any(unreachable):
        v[unreachable] = (surplus[:, unreachable] - w[:, None]).max(axis=0)
    return w, v


def _solve_assignment(surplus: np.ndarray):
    """Square assignment: maximize the trace over permutations."""
    row, col = linear_sum_assignment(-surplus)
    return row, col


def _exact_uniform(mu_w, nu_w, surplus):
    """Uniform weights with divisible sizes via replicated assignment."""
    n, m = surplus.shape
    if n == m:
        row, col = _solve_assignment(surplus)
        coupling = np.zeros((n, m))
        coupling[row, col] = mu_w
        return coupling
    if n > m:
        q = n // m
        rep = np.repeat(np.arange(m), q)
        row, col = _solve_assignment(surplus[:, rep])
        coupling = np.zeros((n, m))
        coupling[row, rep[col]] = 1.0 / n
        return coupling
    q = m // n
    rep = np.repeat(np.arange(n), q)
    row, col = _solve_assignment(surplus[rep, :])
    coupling = np.zeros((n, m))
    np.add.at(coupling, (rep[row], col), 1.0 / m)
    return coupling


def _exact_lp(mu_w, nu_w, surplus):
    """General transportation LP via HiGHS with tightened tolerances."""
    n, m = surplus.shape
    # Row-sum constraints then column-sum constraints on vec(coupling).
    data = np.ones(2 * n * m)
    row_idx = np.concatenate(
        [np.repeat(np.arange(n), m), n + np.tile(np.arange(m), n)]
    )
    col_idx = np.concatenate([np.arange(n * m), np.arange(n * m)])
    a_eq = csr_matrix((data, (row_idx, col_idx)), shape=(n + m, n * m))
    b_eq = np.concatenate([mu_w, nu_w])
    # Dual simplex keeps the solution basic: entries off the optimal basis
    # are exact zeros, so the support is clean for slackness checks.
    res = linprog(
        c=-surplus.ravel(),
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs-ds",
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    coupling = np.maximum(res.x.reshape(n, m), 0.0)
    w = -res.eqlin.marginals[:n]
    v = -res.eqlin.marginals[n:]
    return coupling, w, v


def solve_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, surplus: np.ndarray):
    """Exact Kantorovich solve: optimal plan plus dual potentials.

    Returns (TransportPlan, DualPair) with strong duality, dual
    feasibility on all pairs, and complementary slackness on the
    support.  v is pinned to 0 at the lexicographically smallest
    target point.
    """
    surplus = np.asarray(surplus, dtype=float)
    n, m = surplus.shape
    if mu.n != n or nu.n != m:
        raise ValueError("surplus matrix shape must match the measures")
    if not np.all(np.isfinite(surplus)):
        raise ValueError("surplus must be finite")
    mu_w, nu_w = mu.weights, nu.weights
    ref = _lexicographic_ref(nu.points)

    uniform = (
        np.allclose(mu_w, 1.0 / n, rtol=0.0, atol=1e-12)
        and np.allclose(nu_w, 1.0 / m, rtol=0.0, atol=1e-12)
    )
    divisible = (max(n, m) % min(n, m) == 0) and max(n, m) <= _MAX_ASSIGNMENT_SIZE
    w = v = None
    if m == 1:
        coupling = mu_w[:, None].copy()
    elif n == 1:
        coupling = nu_w[None, :].copy()
    elif uniform and divisible:
        coupling = _exact_uniform(mu_w, nu_w, surplus)
    else:
        coupling, w, v = _exact_lp(mu_w, nu_w, surplus)

    ii, jj = np.nonzero(coupling > 0)
    if w is None:
        w, v = _duals_from_support(surplus, ii, jj, nu_w, ref)
    else:
        # Polish LP duals: the double transform restores exact feasibility
        # and can only move the dual objective toward the optimum.
        w = (surplus - v[None, :]).max(axis=1)
        v = (surplus - w[:, None]).max(axis=0)
    w, v = _pin(w, v, ref)

    objective = float(np.sum(coupling * surplus))
    plan = TransportPlan(coupling, objective)
    duals = DualPair(w, v, ref)
    return plan, duals


def solve_entropic(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    surplus: np.ndarray,
    epsilon: float,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> EntropicResult:
    """Entropic-regularized solve by log-domain scaling iterations.

    Maximizes sum(pi * S) - epsilon * KL(pi | mu x nu) with an
    epsilon-halving schedule from max(1, epsilon) down to epsilon for
    stability at small regularization.  Convergence means the scaling
    iterations pushed the L1 marginal violation below tol; the returned
    plan is additionally rounded onto the marginal polytope (sparsified
    at SPARSITY_THRESHOLD first, a documented lossy step).  Duals are
    the regularized potentials; non-convergence is reported, not
    raised.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    surplus = np.asarray(surplus, dtype=float)
    n, m = surplus.shape
    if mu.n != n or nu.n != m:
        raise ValueError("surplus matrix shape must match the measures")
    mu_w, nu_w = mu.weights, nu.weights
    if np.any(mu_w <= 0) or np.any(nu_w <= 0):
        raise ValueError("entropic path requires strictly positive weights")
    log_mu = np.log(mu_w)
    log_nu = np.log(nu_w)

    schedule = []
    eps_k = max(1.0, epsilon)
    while eps_k > epsilon * (1 + 1e-12):
        schedule.append(eps_k)
        eps_k /= 2
    schedule.append(epsilon)

    w = np.zeros(n)
    v = np.zeros(m)
    iterations = 0
    converged = False
    err = np.inf
    plan = np.outer(mu_w, nu_w)
    for stage, eps in enumerate(schedule):
        last_stage = stage == len(schedule) - 1
        # intermediate stages only warm-start the next one: loose tolerance
        # and a small sweep cap, full budget and tolerance at the target
        stage_tol = tol if last_stage else max(tol, 0.05 * eps)
        stage_cap = max_iter if last_stage else min(max_iter, iterations + 200)
        while iterations < stage_cap:
            iterations += 1
            w = eps * logsumexp((surplus - v[None, :]) / eps, b=nu_w[None, :], axis=1)
            v = eps * logsumexp((surplus - w[:, None]) / eps, b=mu_w[:, None], axis=0)
            log_plan = (
                (surplus - w[:, None] - v[None, :]) / eps
                + log_mu[:, None]
                + log_nu[None, :]
            )
            plan = np.exp(log_plan)
            # column marginals are exact right after the v update
            err = float(np.abs(plan.sum(axis=1) - mu_w).sum())
            if err <= stage_tol:
                if last_stage:
                    converged = True
                break
        if iterations >= max_iter:
            break

    plan[plan < SPARSITY_THRESHOLD] = 0.0
    plan = _round_to_marginals(plan, mu_w, nu_w)
    ref = _lexicographic_ref(nu.points)
    w, v = _pin(w, v, ref)
    objective = float(np.sum(plan * surplus))
    return EntropicResult(
        plan=TransportPlan(plan, objective),
        duals=DualPair(w, v, ref),
        iterations=iterations,
        converged=converged,
        marginal_error_l1=err,
    )


def _round_to_marginals(plan: np.ndarray, mu_w: np.ndarray, nu_w: np.ndarray):
    """Project an almost-feasible plan onto the marginal polytope.

    Scales rows and columns down where they overshoot, then restores
    the missing mass with a rank-one correction; the objective moves by
    at most max|S| times the pre-rounding L1 violation.
    """
    r = plan.sum(axis=1)
    scale = np.ones_like(r)
    np.divide(mu_w, r, out=scale, where=r > 0)
    plan = plan * np.minimum(1.0, scale)[:, None]
    c = plan.sum(axis=0)
    scale = np.ones_like(c)
    np.divide(nu_w, c, out=scale, where=c > 0)
    plan = plan * np.minimum(1.0, scale)[None, :]
    dr = mu_w - plan.sum(axis=1)
    dc = nu_w - plan.sum(axis=0)
    missing = dr.sum()
    if missing > 0:
        plan = plan + np.outer(dr, dc) / missing
    return plan


def barycentric_projection(plan: TransportPlan, source_points: np.ndarray):
    """Mass-weighted mean source point per target column.

    Returns (projection, valid) where projection[j] is the conditional
    mean of the source coordinate given target j, and valid flags
    columns with positive mass; zero-mass columns are NaN-filled and
    flagged out.
    """
    pts = np.atleast_2d(np.asarray(source_points, dtype=float))
    if pts.shape[0] != plan.coupling.shape[0]:
        raise ValueError("source points must align with plan rows")
    col_mass = plan.coupling.sum(axis=0)
    valid = col_mass > 0
    proj = np.full((plan.coupling.shape[1], pts.shape[1]), np.nan)
    proj[valid] = (plan.coupling.T[valid] @ pts) / col_mass[valid, None]
    return proj, valid


@dataclass(frozen=True)
class MonotonicityReport:
    applicable: bool
    trials: int
    violations: int
    worst_margin: float
    violating_cycle: Optional[list]

    @property
    def passed(self) -> bool:
        return not self.applicable or self.violations == 0


def check_cyclical_monotonicity(
    plan: TransportPlan,
    surplus: np.ndarray,
    k: int = 2,
    trials: int = 1000,
    seed: int = 0,
    tol: float = 1e-9,
) -> MonotonicityReport:
    """Sampled k-cycle optimality fingerprint of a plan's support.

    Draws `trials` random k-subsets of support pairs and checks that
    the cyclic reassignment does not increase total surplus.  Margins
    below -tol are counted as violations.
    """
    if k < 2:
        raise ValueError("cycle length must be at least 2")
    ii, jj, _ = plan.support()
    n_sup = ii.shape[0]
    if n_sup < k:
        return MonotonicityReport(False, 0, 0, np.inf, None)
    rng = np.random.default_rng(seed)
    worst = np.inf
    violations = 0
    witness = None
    for _ in range(trials):
        pick = rng.choice(n_sup, size=k, replace=False)
        si, sj = ii[pick], jj[pick]
        kept = surplus[si, sj].sum()
        swapped = surplus[si, np.roll(sj, -1)].sum()
        margin = float(kept - swapped)
        if margin < worst:
            worst = margin
            if margin < -tol:
                witness = list(zip(si.tolist(), sj.tolist()))
        if margin < -tol:
            violations += 1
    return MonotonicityReport(True, trials, violations, worst, witness)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_plan_csv(plan: TransportPlan, path) -> None:
    """Support triplets i,j,mass."""
    ii, jj, mass = plan.support()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "mass"])
        for a, b, m in zip(ii, jj, mass):
            writer.writerow([int(a), int(b), _fmt(m)])


def read_plan_coupling(path, shape) -> np.ndarray:
    """Rebuild the dense coupling matrix from a support-triplet file."""
    coupling = np.zeros(shape)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                coupling[int(row[0]), int(row[1])] = float(row[2])
    return coupling


def write_duals_csv(duals: DualPair, path) -> None:
    """Vectors as rows side,idx,value with side in {source,target}."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["side", "idx", "value"])
        for i, val in enumerate(duals.w_source):
            writer.writerow(["source", i, _fmt(val)])
        for j, val in enumerate(duals.v_target):
            writer.writerow(["target", j, _fmt(val)])


def read_duals_csv(path) -> DualPair:
    w, v = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if not row:
                continue
            (w if row[0] == "source" else v).append((int(row[1]), float(row[2])))
    w_arr = np.array([val for _, val in sorted(w)])
    v_arr = np.array([val for _, val in sorted(v)])
    ref = int(np.argmin(np.abs(v_arr))) if v_arr.size else 0
    return DualPair(w_arr, v_arr, ref)
