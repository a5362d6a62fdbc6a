"""Discrete Bellman / Isaacs systems over finite control sets.

Solver orientation
------------------
All residual formulas in this module act on systems
``F(x) = min_b max_a [K^{ab} x - f^{ab}]`` whose matrices are
inverse-positive (M-matrices).  Elliptic assembly produces operators L_h
with nonnegative off-diagonal stencil weights, so ``assemble_bellman``
negates operators and sources once: K = -L_h, f = -(rhs).  With a singleton
second control set this is exactly the classical policy-iteration setting,
and Howard's algorithm terminates finitely with monotone iterates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fdcore
from .errors import Diverging, EmptyControlSet, NoConvergence, SingularSystem
from .lattice import Lattice, NodalFunction


@dataclass
class ControlProblem:
    """Finite-control elliptic problem data in PDE (elliptic) orientation.

    ``coefficient(alpha, beta)`` returns a constant SPD 2x2 matrix or a
    callable z -> matrix; ``source(alpha, beta)`` a constant or callable.
    A singleton ``controls_b`` makes this an HJB problem.
    """

    controls_a: list
    controls_b: list
    coefficient: object
    source: object
    g: object
    lattice: Lattice
    m_max: int = 6

    def __post_init__(self):
        if not self.controls_a or not self.controls_b:
            raise EmptyControlSet("control sets must be nonempty")


@dataclass
class Policy:
    """Per-node control selection (indices into the control sets)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Policy):
            return NotImplemented
        return np.array_equal(self.alpha, other.alpha) and np.array_equal(self.beta, other.beta)

    def key(self) -> bytes:
        return self.alpha.tobytes() + self.beta.tobytes()


@dataclass
class TraceEntry:
    iter: int
    residual_sup: float
    policy_changes: int
    x_min: float
    x_max: float


def dump_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "residual_sup", "policy_changes", "x_min", "x_max"])
        for t in trace:
            w.writerow(
                [t.iter, repr(t.residual_sup), t.policy_changes, repr(t.x_min), repr(t.x_max)]
            )


class BellmanSystem:
    """Per-control matrices K^{ab} (inverse-positive) and sources f^{ab}."""

    def __init__(self, K, f, n_a, n_b, lattice=None, g_nodal=None, directions=None):
        self.K = {k: sp.csr_matrix(v) for k, v in K.items()}
        self.f = {k: np.asarray(v, float) for k, v in f.items()}
        self.n_a = n_a
        self.n_b = n_b
        first = self.K[(0, 0)]
        self.n = first.shape[0]
        self.lattice = lattice
        self.g_nodal = g_nodal
        self.directions = directions
        self.scale = 1.0 + max(float(np.abs(v).max(initial=0.0)) for v in self.f.values())

    @classmethod
    def from_matrices(cls, K_list, f_list, n_b: int = 1, lattice=None, g_nodal=None):
        """Build from nested lists K_list[ia][ib] (or flat lists when n_b == 1)."""
        K, f = {}, {}
        if n_b == 1 and not isinstance(K_list[0], (list, tuple)):
            K_list = [[k] for k in K_list]
            f_list = [[v] for v in f_list]
        for ia, row in enumerate(K_list):
            for ib, mat in enumerate(row):
                K[(ia, ib)] = mat
                f[(ia, ib)] = f_list[ia][ib]
        return cls(K, f, len(K_list), n_b, lattice=lattice, g_nodal=g_nodal)

    def residual_cube(self, x: np.ndarray) -> np.ndarray:
        """r[ia, ib, :] = K^{ab} x - f^{ab}."""
        out = np.empty((self.n_a, self.n_b, self.n))
        for (ia, ib), K in self.K.items():
            out[ia, ib] = K @ x - self.f[(ia, ib)]
        return out

    def wrap(self, x: np.ndarray) -> NodalFunction | np.ndarray:
        if self.lattice is None:
            return x
        vals = np.concatenate([x, self.g_nodal])
        return NodalFunction(self.lattice, vals)


def assemble_bellman(problem: ControlProblem) -> BellmanSystem:
    """Assemble per-control positive operators and negate into solver orientation."""
    K, f = {}, {}
    dir_union: dict = {}
    g_nodal = None
    for ia, a in enumerate(problem.controls_a):
        for ib, b in enumerate(problem.controls_b):
            try:
                op = fdcore.assemble_linear(
                    problem.coefficient(a, b),
                    problem.source(a, b),
                    problem.g,
                    problem.lattice,
                    problem.m_max,
                )
            except fdcore.StencilExhausted as exc:
                exc.control = (a, b)
                raise
            for y in op.directions:
                dir_union.setdefault(tuple(int(c) for c in y), None)
            rhs = op.f_int - op.B_bnd @ op.g_nodal - op.c_exit
            K[(ia, ib)] = (-op.A_int).tocsr()
            f[(ia, ib)] = -rhs
            g_nodal = op.g_nodal
    return BellmanSystem(
        K,
        f,
        len(problem.controls_a),
        len(problem.controls_b),
        lattice=problem.lattice,
        g_nodal=g_nodal,
        directions=tuple(dir_union.keys()),
    )


def bellman_residual(system: BellmanSystem, x: np.ndarray) -> np.ndarray:
    """F(x) = min_b max_a [K^{ab} x - f^{ab}], componentwise."""
    cube = system.residual_cube(np.asarray(x, float))
    return cube.max(axis=0).min(axis=0)


def select_policy(system: BellmanSystem, x: np.ndarray) -> Policy:
    """Argmin/argmax achieving the residual, lowest index on ties."""
    cube = system.residual_cube(np.asarray(x, float))
    over_a = cube.max(axis=0)  # (n_b, n)
    beta = over_a.argmin(axis=0)
    rows = cube[:, beta, np.arange(system.n)]  # (n_a, n)
    alpha = rows.argmax(axis=0)
    return Policy(alpha.astype(np.int64), beta.astype(np.int64))


def _policy_matrix(system: BellmanSystem, policy: Policy):
    """Row-mixed matrix/source: row i taken from K^{alpha_i, beta_i}."""
    n = system.n
    K_out = sp.csr_matrix((n, n))
    f_out = np.empty(n)
    for ia in range(system.n_a):
        for ib in range(system.n_b):
            rows = np.flatnonzero((policy.alpha == ia) & (policy.beta == ib))
            if len(rows) == 0:
                continue
            D = sp.csr_matrix(
                (np.ones(len(rows)), (rows, rows)), shape=(n, n)
            )
            K_out = K_out + D @ system.K[(ia, ib)]
            f_out[rows] = system.f[(ia, ib)][rows]
    return K_out.tocsc(), f_out


def _solve_policy(system: BellmanSystem, policy: Policy) -> np.ndarray:
    K, fvec = _policy_matrix(system, policy)
    try:
        x = spla.spsolve(K, fvec)
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("policy linear solve produced non-finite values")
    return np.atleast_1d(x)


@dataclass
class SolveResult:
    """Solver output: solution vector, final policy, and iteration trace."""

    x: np.ndarray
    policy: Policy | None
    trace: list = field(default_factory=list)
    converged: bool = True
    iterations: int = 0
    monotonicity_violation: float = 0.0
    contraction_ratio: float = float("nan")
    inner: list = field(default_factory=list)

    def __iter__(self):  # allow x, policy, trace = result
        return iter((self.x, self.policy, self.trace))


def _default_init(system: BellmanSystem) -> np.ndarray:
    policy = Policy(np.zeros(system.n, np.int64), np.zeros(system.n, np.int64))
    return _solve_policy(system, policy)


def howard_solve(
    system: BellmanSystem,
    x_init: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int | None = None,
) -> SolveResult:
    """Policy iteration for F(x) = max_a [K^a x - f^a] = 0 (singleton b).

    Terminates on policy repetition or residual below tol * scale; iterates
    are monotone nonincreasing for inverse-positive policy matrices.
    """
    if system.n_b != 1:
        raise ValueError("howard_solve needs a singleton second control set")
    if max_iter is None:
        max_iter = max(8, int(10 * system.n_a * math.sqrt(system.n)))
    x = _default_init(system) if x_init is None else np.asarray(x_init, float).copy()
    tol_abs = tol * system.scale
    trace: list[TraceEntry] = []
    prev_policy = None
    mono = 0.0
    solved_once = False
    for k in range(max_iter):
        policy = select_policy(system, x)
        changes = (
            int((policy.alpha != prev_policy.alpha).sum()) if prev_policy is not None else system.n
        )
        if prev_policy is not None and changes == 0:
            res = float(np.abs(bellman_residual(system, x)).max())
            trace.append(TraceEntry(k, res, 0, float(x.min()), float(x.max())))
            return SolveResult(x, policy, trace, True, k, mono)
        x_new = _solve_policy(system, policy)
        if solved_once:  # x_k >= x_{k+1} holds between solved iterates only
            mono = max(mono, float((x_new - x).max(initial=-np.inf)))
        solved_once = True
        res = float(np.abs(bellman_residual(system, x_new)).max())
        trace.append(TraceEntry(k, res, changes, float(x_new.min()), float(x_new.max())))
        x = x_new
        prev_policy = policy
        if res <= tol_abs:
            return SolveResult(x, policy, trace, True, k + 1, mono)
    raise NoConvergence(f"Howard iteration cap {max_iter} reached", trace)


def two_level_howard(
    system: BellmanSystem,
    x_init: np.ndarray | None = None,
    tol: float = 1e-10,
    max_outer: int | None = None,
) -> SolveResult:
    """Outer policy iteration over b, each step solving an HJB in a by Howard.

    With a singleton b this reduces to a single inner ``howard_solve`` whose
    trace is returned unchanged.
    """
    if max_outer is None:
        max_outer = max(8, int(10 * system.n_b * math.sqrt(system.n)))
    tol_abs = tol * system.scale

    if system.n_b == 1:
        inner = howard_solve(system, x_init, tol=tol)
        result = SolveResult(
            inner.x,
            inner.policy,
            inner.trace,
            inner.converged,
            inner.iterations,
            inner.monotonicity_violation,
        )
        result.inner = [inner.trace]
        return result

    x = (
        _default_init(system)
        if x_init is None
        else np.asarray(x_init, float).copy()
    )
    trace: list[TraceEntry] = []
    inner_traces = []
    mono = 0.0
    prev_beta = None
    solved_once = False
    for k in range(max_outer):
        cube = system.residual_cube(x)
        beta = cube.max(axis=0).argmin(axis=0).astype(np.int64)
        # inner HJB: row i of control a comes from K^{a, beta_i}
        K_inner, f_inner = {}, {}
        for ia in range(system.n_a):
            K_mix = sp.csr_matrix((system.n, system.n))
            f_mix = np.empty(system.n)
            for ib in range(system.n_b):
                rows = np.flatnonzero(beta == ib)
                if len(rows) == 0:
                    continue
                D = sp.csr_matrix((np.ones(len(rows)), (rows, rows)), shape=(system.n, system.n))
                K_mix = K_mix + D @ system.K[(ia, ib)]
                f_mix[rows] = system.f[(ia, ib)][rows]
            K_inner[(ia, 0)] = K_mix.tocsr()
            f_inner[(ia, 0)] = f_mix
        sub = BellmanSystem(K_inner, f_inner, system.n_a, 1)
        sub.scale = system.scale
        inner = howard_solve(sub, x, tol=tol)
        inner_traces.append(inner.trace)
        x_new = inner.x
        if solved_once:
            mono = max(mono, float((x_new - x).max(initial=-np.inf)))
        solved_once = True
        res = float(np.abs(bellman_residual(system, x_new)).max())
        changes = int((beta != prev_beta).sum()) if prev_beta is not None else system.n
        trace.append(TraceEntry(k, res, changes, float(x_new.min()), float(x_new.max())))
        x = x_new
        if res <= tol_abs:
            alpha = select_policy(system, x).alpha
            result = SolveResult(x, Policy(alpha, beta), trace, True, k + 1, mono)
            result.inner = inner_traces
            return result
        prev_beta = beta
    raise NoConvergence(f"two-level Howard outer cap {max_outer} reached", trace)


def default_lambda(system: BellmanSystem) -> float:
    """1.01 * largest diagonal entry over all control matrices."""
    best = 0.0
    for K in system.K.values():
        best = max(best, float(K.diagonal().max(initial=0.0)))
    return 1.01 * best


def richardson_solve(
    system: BellmanSystem,
    x_init: np.ndarray | None = None,
    lambda_n: float | None = None,
    tol: float = 1e-8,
    max_iter: int = 10**6,
) -> SolveResult:
    """Damped fixed-point iteration x <- x - F(x) / Lambda_N.

    Contracts when Lambda_N dominates the diagonal scale of the system;
    successive residual ratios are monitored and reported.
    """
    lam = default_lambda(system) if lambda_n is None else float(lambda_n)
    x = np.zeros(system.n) if x_init is None else np.asarray(x_init, float).copy()
    tol_abs = tol * system.scale
    trace: list[TraceEntry] = []
    res_prev = None
    res_min = np.inf
    ratios = []
    for k in range(max_iter):
        F = bellman_residual(system, x)
        res = float(np.abs(F).max())
        if k < 50 or res <= tol_abs:
            trace.append(TraceEntry(k, res, 0, float(x.min()), float(x.max())))
        if res <= tol_abs:
            ratio = float(np.mean(ratios[-20:])) if ratios else 0.0
            return SolveResult(x, None, trace, True, k, 0.0, ratio)
        res_min = min(res_min, res)
        if res > 10.0 * res_min and res > 10.0 * tol_abs:
            raise Diverging(f"residual grew 10x (iteration {k})", trace)
        if res_prev is not None and res_prev > 0:
            ratios.append(res / res_prev)
        res_prev = res
        x = x - F / lam
    raise NoConvergence(f"Richardson cap {max_iter} reached", trace)


@dataclass
class SystemCheck:
    """Sign-pattern check: inverse-positivity sufficient conditions."""

    ok: bool
    min_diag: float
    max_offdiag: float
    min_row_dominance: float
    messages: list


def check_system(system: BellmanSystem) -> SystemCheck:
    """Verify each K has positive diagonal, nonpositive off-diagonal, weak dominance."""
    min_diag = np.inf
    max_off = -np.inf
    min_dom = np.inf
    msgs = []
    for key, K in system.K.items():
        A = K.tocoo()
        diag = K.diagonal()
        min_diag = min(min_diag, float(diag.min(initial=np.inf)))
        off = A.data[A.row != A.col]
        if len(off):
            max_off = max(max_off, float(off.max()))
        rowsum_off = np.asarray(np.abs(K - sp.diags(diag)).sum(axis=1)).ravel()
        min_dom = min(min_dom, float((diag - rowsum_off).min(initial=np.inf)))
        if float(diag.min(initial=np.inf)) <= 0:
            msgs.append(f"nonpositive diagonal in K{key}")
        if len(off) and off.max() > 1e-14:
            msgs.append(f"positive off-diagonal in K{key}")
    ok = not msgs and min_dom >= -1e-12
    if min_dom < -1e-12:
        msgs.append("row dominance violated")
    return SystemCheck(ok, float(min_diag), float(max_off), float(min_dom), msgs)
