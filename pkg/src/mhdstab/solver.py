"""Implicit Euler time stepping with a Picard loop for the MHD schemes.

One Picard iteration solves the linear saddle-point system

    [ M_u/tau + nu_S A_S + C(chi) + J(Theta)   B_q^T   -D(Theta)              0     ] [u]
    [ B_q                                      0        0                     0     ] [p]
    [ D(Theta)^T                               0        M_B/tau + nu_M A_M + S -B_r^T] [B]
    [ 0                                        0        B_r                   Y     ] [phi]

where (chi, Theta) is the previous iterate, S is the grad-div term (nostab,
stab3f) or K(chi) (stab4f), and the last row/column only exist for stab4f.
J is dropped for nostab. Zero-mean conditions on p and phi are appended as
scalar Lagrange multiplier rows; essential dofs are eliminated.
"""

from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import forms
from .fespace import (
    FESpace,
    FieldVector,
    build_bdm_space,
    build_cg_vector_space,
    build_multiplier_space,
    build_pressure_space,
    divergence,
)
from .forms import StabParams, quad_degree
from .mesh import Mesh

log = logging.getLogger(__name__)


class PicardDivergence(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class SingularSystemError(RuntimeError):
    pass


@dataclass
class PicardConfig:
    tol: float = 1e-8
    max_iters: int = 50
    raise_on_failure: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("Picard tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SolutionState:
    t: float
    u: FieldVector
    p: FieldVector
    B: FieldVector
    phi: FieldVector | None = None


@dataclass
class StepDiagnostics:
    t: float
    picard_iters: int
    increment: float
    energy: float
    div_l2: float
    h1h_norm: float
    history: list = field(default_factory=list)
    monotone: bool = True

    def csv(self) -> str:
        return (
            f"{self.t:.9e},{self.picard_iters},{self.increment:.9e},"
            f"{self.energy:.9e},{self.div_l2:.9e},{self.h1h_norm:.9e}"
        )


STEP_CSV_HEADER = "t,picard_iters,increment,energy,div_l2,h1h_norm"


class HomogeneousData:
    """Zero loads and homogeneous boundary conditions."""

    @staticmethod
    def _zero(x, t):
        return np.zeros((len(np.atleast_2d(x)), 3))

    f = G = u = B = _zero

    @staticmethod
    def magnetic_boundary_data(x, n, t):
        return np.zeros((len(np.atleast_2d(x)), 3))


@dataclass
class LinearSaddleSystem:
    """Assembled blocks of one Picard iteration, before elimination."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    fixed: np.ndarray  # global indices of eliminated dofs
    fixed_values: np.ndarray
    mean_rows: list  # (offset, vector) pairs for zero-mean constraints
    blocks: list  # (name, start, stop)


class LinearSolver:
    """Sparse LU of the saddle-point system, reused across Picard iterations.

    The bordered system (essential dofs eliminated, one zero-mean multiplier
    row per constrained field) is solved with GMRES preconditioned by the
    SuperLU factors of a sparse surrogate in which the dense border is
    replaced by pinning one dof of each constrained field. When the
    surrogate is the current matrix, GMRES converges in a handful of
    iterations; when it is stale (an earlier Picard iterate), the
    factorization is refreshed once convergence slows. Systems below
    ``direct_below`` unknowns skip the surrogate and factor the bordered
    matrix directly.
    """

    def __init__(self, *, check_tol: float = 1e-9, rtol: float = 1e-12, refactor_iters: int = 60,
                 direct_below: int = 6000):
        self.check_tol = check_tol
        self.rtol = rtol
        self.refactor_iters = refactor_iters
        self.direct_below = direct_below
        self._lu = None
        self._key = None
        self.n_factorizations = 0
        self.last_iters = 0

    def reset(self):
        self._lu = None
        self._key = None

    def solve(self, system: LinearSaddleSystem) -> np.ndarray:
        """Full unknown vector (multipliers dropped)."""
        A, b = system.matrix, system.rhs
        n = A.shape[0]
        free_mask = np.ones(n, dtype=bool)
        free_mask[system.fixed] = False
        free = np.flatnonzero(free_mask)
        x = np.zeros(n)
        x[system.fixed] = system.fixed_values

        Acsc = A.tocsc()
        Aff = Acsc[free][:, free]
        rhs = b[free] - (Acsc[:, system.fixed] @ system.fixed_values)[free]

        index = np.full(n, -1)
        index[free] = np.arange(len(free))
        cols, pins = [], []
        for offset, vec in system.mean_rows:
            col = np.zeros(n)
            col[offset : offset + len(vec)] = vec
            cols.append(col[free])
            pins.append(index[offset + int(np.argmax(np.abs(vec)))])
        nb = len(cols)
        if nb:
            E = sp.csc_matrix(np.column_stack(cols))
            K = sp.bmat([[Aff, E], [E.T, None]], format="csc")
            rhs = np.concatenate([rhs, np.zeros(nb)])
        else:
            K = Aff.tocsc()

        if not np.any(rhs):
            return x
        if K.shape[0] < self.direct_below:
            sol = self._direct(K, rhs, system.blocks, free)
        else:
            sol = self._preconditioned(K, Aff, pins, rhs, system.blocks, free)
        res = np.linalg.norm(K @ sol - rhs) / np.linalg.norm(rhs)
        if not np.isfinite(res) or res > self.check_tol:
            raise SingularSystemError(f"linear solve residual {res:.3e} exceeds {self.check_tol:.1e}")
        x[free] = sol[: len(free)]
        return x

    def _factor(self, M, blocks, free):
        try:
            lu = spla.splu(M)
        except RuntimeError as exc:
            raise SingularSystemError(_singular_diagnostic(M, free, blocks, str(exc))) from exc
        self.n_factorizations += 1
        return lu

    def _direct(self, K, rhs, blocks, free):
        sol = self._factor(K, blocks, free).solve(rhs)
        self.last_iters = 0
        if not np.all(np.isfinite(sol)):
            raise SingularSystemError(_singular_diagnostic(K, free, blocks, "non-finite solution"))
        return sol

    def _surrogate(self, Aff, pins):
        keep = np.ones(Aff.shape[0])
        keep[pins] = 0.0
        D = sp.diags(keep)
        unit = sp.csc_matrix((np.ones(len(pins)), (pins, pins)), shape=Aff.shape)
        return (D @ Aff @ D + unit).tocsc()

    def _preconditioned(self, K, Aff, pins, rhs, blocks, free):
        n_core, nb = Aff.shape[0], K.shape[0] - Aff.shape[0]
        key = (K.shape, tuple(pins))
        for attempt in range(2):
            if self._lu is None or self._key != key:
                self._lu = self._factor(self._surrogate(Aff, pins), blocks, free)
                self._key = key
                fresh = True
            else:
                fresh = False
            lu = self._lu

            def apply(r, lu=lu):
                out = np.empty_like(r)
                out[:n_core] = lu.solve(r[:n_core])
                out[n_core:] = r[n_core:]
                return out

            M = spla.LinearOperator(K.shape, matvec=apply)
            iters = [0]

            def count(_):
                iters[0] += 1

            sol, info = spla.gmres(
                K, rhs, M=M, rtol=self.rtol, atol=0.0, restart=100, maxiter=3,
                callback=count, callback_type="pr_norm",
            )
            self.last_iters = iters[0]
            ok = info == 0 and np.all(np.isfinite(sol))
            if ok and (fresh or iters[0] <= self.refactor_iters):
                return sol
            if ok:
                self._lu = None  # converged but slowly: refresh for next time
                return sol
            if fresh:
                break
            self._lu = None
        raise SingularSystemError(
            _singular_diagnostic(K, free, blocks, f"preconditioned solve stalled after {iters[0]} iterations")
        )


def solve_linear(system: LinearSaddleSystem, *, check_tol: float = 1e-9) -> np.ndarray:
    """One-shot solve of an assembled saddle-point system.

    Returns the full unknown vector (without the multipliers).
    """
    return LinearSolver(check_tol=check_tol).solve(system)


def _singular_diagnostic(Aff, free, blocks, reason):
    Acsr = Aff.tocsr()
    nnz_row = np.diff(Acsr.indptr)
    empty = np.flatnonzero(nnz_row[: len(free)] == 0)
    names = []
    for idx in free[empty]:
        for name, a, b in blocks:
            if a <= idx < b and name not in names:
                names.append(name)
    where = f"zero rows in block(s) {', '.join(names)}" if names else "numerically singular (no structurally empty rows)"
    return f"factorization failed ({reason}): {where}"


class MHDSolver:
    """Spaces, constant operators and the per-step solve for one scheme."""

    def __init__(self, mesh: Mesh, params: StabParams, order: int = 1, data=None):
        self.mesh = mesh
        self.params = params
        self.order = order
        self.data = data if data is not None else HomogeneousData()
        self.V = build_bdm_space(mesh, order)
        self.Q = build_pressure_space(mesh, order)
        self.W = build_cg_vector_space(mesh, order, normal_bc=True)
        self.R = build_multiplier_space(mesh, order) if params.scheme == "stab4f" else None
        self.degree = quad_degree(order)
        self.linear = LinearSolver()

        self.M_u = forms.assemble_mass(self.V)
        self.M_B = forms.assemble_mass(self.W)
        self.A_S = forms.assemble_asip(self.V, params.mu_a)
        self.A_M = forms.assemble_aM(self.W)
        self.B_q = forms.assemble_b(self.V, self.Q)
        self.mean_q = forms.assemble_mean(self.Q)
        if params.scheme == "stab4f":
            self.B_r = forms.assemble_b(self.W, self.R)
            self.Y = forms.assemble_Yh(self.R, params.mu_y)
            self.mean_r = forms.assemble_mean(self.R)
        else:
            self.GD = forms.assemble_graddiv(self.W)

    # --- layout --------------------------------------------------------

    @property
    def sizes(self):
        s = [("u", self.V.n_dofs), ("p", self.Q.n_dofs), ("B", self.W.n_dofs)]
        if self.R is not None:
            s.append(("phi", self.R.n_dofs))
        return s

    @property
    def n_dofs(self) -> int:
        return sum(n for _, n in self.sizes)

    def _offsets(self):
        out, start = {}, 0
        for name, n in self.sizes:
            out[name] = (start, start + n)
            start += n
        return out

    # --- states --------------------------------------------------------

    def initial_state(self, u0=None, B0=None, t0: float = 0.0) -> SolutionState:
        """Interpolated initial data (zero when a field is not given)."""
        u = self.V.interpolate(u0, t0) if u0 is not None else self.V.zero()
        B = self.W.interpolate(B0, t0) if B0 is not None else self.W.zero()
        phi = self.R.zero() if self.R is not None else None
        return SolutionState(t0, u, self.Q.zero(), B, phi)

    def energy(self, state: SolutionState) -> float:
        u, B = state.u.coeffs, state.B.coeffs
        return float(u @ (self.M_u @ u) + B @ (self.M_B @ B))

    def divergence_l2(self, u: FieldVector) -> float:
        tab = self.V.volume_tables(self.degree)
        _, g = u.on_volume(self.degree)
        return float(np.sqrt(np.sum(tab.w * divergence(g) ** 2)))

    def broken_h1(self, u: FieldVector) -> float:
        tab = self.V.volume_tables(self.degree)
        v, g = u.on_volume(self.degree)
        return float(np.sqrt(np.sum(tab.w * (np.sum(v**2, -1) + np.sum(g**2, (-1, -2))))))

    # --- assembly ------------------------------------------------------

    def assemble(self, state_n: SolutionState, chi: FieldVector, theta: FieldVector, t: float) -> LinearSaddleSystem:
        p = self.params
        tau = p.tau
        C = forms.assemble_convection_upwind(self.V, chi, p.mu_c)
        D = forms.assemble_lorentz_d(theta, self.W, self.V)
        Auu = self.M_u / tau + p.nu_s * self.A_S + C
        if p.scheme != "nostab":
            Auu = Auu + forms.assemble_Jh(self.V, theta, p.mu_j1, p.mu_j2)
        ABB = self.M_B / tau + p.nu_m * self.A_M
        if p.scheme == "stab4f":
            ABB = ABB + forms.assemble_Kh(self.W, chi, p.mu_k)
        else:
            ABB = ABB + self.GD

        data = self.data
        ru = self.M_u @ state_n.u.coeffs / tau + forms.assemble_load(self.V, data.f, t)
        ru += p.nu_s * forms.assemble_nitsche_data(self.V, data.u, t, p.mu_a)
        rB = self.M_B @ state_n.B.coeffs / tau + forms.assemble_load(self.W, data.G, t)
        rB += forms.assemble_boundary_load(self.W, data.magnetic_boundary_data, t)

        if self.R is None:
            K = sp.bmat(
                [[Auu, self.B_q.T, -D], [self.B_q, None, None], [D.T, None, ABB]],
                format="csr",
            )
            rhs = np.concatenate([ru, np.zeros(self.Q.n_dofs), rB])
        else:
            K = sp.bmat(
                [
                    [Auu, self.B_q.T, -D, None],
                    [self.B_q, None, None, None],
                    [D.T, None, ABB, -self.B_r.T],
                    [None, None, self.B_r, self.Y],
                ],
                format="csr",
            )
            rhs = np.concatenate([ru, np.zeros(self.Q.n_dofs), rB, np.zeros(self.R.n_dofs)])

        off = self._offsets()
        fixed = np.concatenate([self.V.constrained_dofs + off["u"][0], self.W.constrained_dofs + off["B"][0]])
        values = np.concatenate([self.V.boundary_values(data.u, t), self.W.boundary_values(data.B, t)])
        means = [(off["p"][0], self.mean_q)]
        if self.R is not None:
            means.append((off["phi"][0], self.mean_r))
        blocks = [(name, a, b) for name, (a, b) in off.items()]
        return LinearSaddleSystem(K, rhs, fixed, values, means, blocks)

    def _split(self, x, t) -> SolutionState:
        off = self._offsets()
        u = FieldVector(self.V, x[slice(*off["u"])])
        p = FieldVector(self.Q, x[slice(*off["p"])])
        B = FieldVector(self.W, x[slice(*off["B"])])
        phi = FieldVector(self.R, x[slice(*off["phi"])]) if self.R is not None else None
        return SolutionState(t, u, p, B, phi)

    # --- stepping ------------------------------------------------------

    def time_step(self, state_n: SolutionState, picard: PicardConfig | None = None):
        """Advance one implicit Euler step. Returns (state, diagnostics)."""
        picard = picard or PicardConfig()
        t = state_n.t + self.params.tau
        chi, theta = state_n.u, state_n.B
        history = []
        new = None
        for it in range(1, picard.max_iters + 1):
            system = self.assemble(state_n, chi, theta, t)
            x = self.linear.solve(system)
            new = self._split(x, t)
            du = np.linalg.norm(new.u.coeffs - chi.coeffs)
            dB = np.linalg.norm(new.B.coeffs - theta.coeffs)
            scale = np.linalg.norm(new.u.coeffs) + np.linalg.norm(new.B.coeffs) + 1e-14
            inc = (du + dB) / scale
            history.append(inc)
            log.debug("t=%.4g picard %d increment %.3e", t, it, inc)
            chi, theta = new.u, new.B
            if inc <= picard.tol:
                break
        else:
            if picard.raise_on_failure:
                raise PicardDivergence(
                    f"Picard did not converge in {picard.max_iters} iterations at t={t:.6g} "
                    f"(last increment {history[-1]:.3e})",
                    history,
                )
            log.warning("Picard did not converge at t=%.6g (increment %.3e)", t, history[-1])
        monotone = all(b <= a for a, b in zip(history[1:], history[2:]))
        if not monotone:
            log.warning("non-monotone Picard increments at t=%.6g: %s", t, history)
        diag = StepDiagnostics(
            t=t,
            picard_iters=len(history),
            increment=history[-1],
            energy=self.energy(new),
            div_l2=self.divergence_l2(new.u),
            h1h_norm=self.broken_h1(new.u),
            history=history,
            monotone=monotone,
        )
        return new, diag


def time_step(solver: MHDSolver, state_n: SolutionState, picard: PicardConfig | None = None):
    return solver.time_step(state_n, picard)


@dataclass
class Trajectory:
    solver: MHDSolver
    states: list
    diagnostics: list
    wall_time: float = 0.0

    @property
    def final(self) -> SolutionState:
        return self.states[-1]


def run_transient(
    scheme: str,
    case,
    mesh: Mesh,
    params: StabParams,
    tau: float,
    T: float,
    *,
    order: int = 1,
    picard: PicardConfig | None = None,
    stream=None,
) -> Trajectory:
    """Integrate from t = 0 to T with N = round(T / tau) steps.

    ``case`` supplies exact fields (initial and boundary data) and forcings.
    With ``stream`` set, one CSV diagnostic line per step is written to it.
    """
    nsteps = int(round(T / tau))
    if nsteps < 1 or abs(nsteps * tau - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} is not an integer multiple of tau={tau}")
    if params.scheme != scheme.lower() or params.tau != tau:
        params = StabParams(**{**params.__dict__, "scheme": scheme, "tau": tau})
    start = _time.perf_counter()
    solver = MHDSolver(mesh, params, order=order, data=case)
    state = solver.initial_state(case.u, case.B, 0.0)
    states, diags = [state], []
    if stream is not None:
        stream.write(STEP_CSV_HEADER + "\n")
    for _ in range(nsteps):
        state, diag = solver.time_step(state, picard)
        states.append(state)
        diags.append(diag)
        if stream is not None:
            stream.write(diag.csv() + "\n")
            stream.flush()
    return Trajectory(solver, states, diags, _time.perf_counter() - start)
