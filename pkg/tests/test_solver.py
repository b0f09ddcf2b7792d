import io

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from mhdstab.fespace import FieldVector, build_bdm_space, build_pressure_space
from mhdstab.forms import StabParams, assemble_asip, assemble_b, assemble_mass, assemble_mean
from mhdstab.mesh import build_structured_tet_mesh
from mhdstab.mms import ManufacturedCase
from mhdstab.solver import (
    STEP_CSV_HEADER,
    LinearSaddleSystem,
    LinearSolver,
    MHDSolver,
    PicardConfig,
    PicardDivergence,
    SingularSystemError,
    SolutionState,
    run_transient,
    solve_linear,
    time_step,
)

from .oracles import random_smooth_fields

SCHEMES = ["nostab", "stab3f", "stab4f"]


def random_state(solver, rng, t0=0.0):
    """Random velocity in the discrete kernel and random magnetic field,
    both with homogeneous constrained dofs."""
    V, W = solver.V, solver.W
    free = V.free_dofs
    Z = sla.null_space(solver.B_q.toarray()[:, free])
    cu = np.zeros(V.n_dofs)
    cu[free] = Z @ rng.normal(size=Z.shape[1])
    cB = rng.normal(size=W.n_dofs)
    cB[W.constrained_dofs] = 0.0
    phi = solver.R.zero() if solver.R is not None else None
    return SolutionState(t0, FieldVector(V, cu), solver.Q.zero(), FieldVector(W, cB), phi)


# --- linear algebra --------------------------------------------------------


def test_identity_system():
    n = 7
    rhs = np.arange(1.0, n + 1)
    sys = LinearSaddleSystem(sp.identity(n, format="csr"), rhs, np.array([], int), np.array([]), [], [("x", 0, n)])
    assert np.allclose(solve_linear(sys), rhs, atol=1e-15)


def test_fixed_dofs_returned():
    A = sp.csr_matrix(np.array([[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]]))
    sys = LinearSaddleSystem(A, np.array([1.0, 2.0, 3.0]), np.array([2]), np.array([0.5]), [], [("x", 0, 3)])
    x = solve_linear(sys)
    assert x[2] == 0.5
    dense = np.linalg.solve(A.toarray()[:2, :2], np.array([1.0, 2.0]) - A.toarray()[:2, 2] * 0.5)
    assert np.allclose(x[:2], dense, atol=1e-14)


def _stokes_system(mesh, rng):
    V = build_bdm_space(mesh, 1)
    Q = build_pressure_space(mesh, 1)
    Auu = assemble_mass(V) + assemble_asip(V, 10.0)
    Bq = assemble_b(V, Q)
    K = sp.bmat([[Auu, Bq.T], [Bq, None]], format="csr")
    rhs = np.concatenate([rng.normal(size=V.n_dofs), np.zeros(Q.n_dofs)])
    fixed = V.constrained_dofs
    sys = LinearSaddleSystem(
        K, rhs, fixed, np.zeros(len(fixed)), [(V.n_dofs, assemble_mean(Q))], [("u", 0, V.n_dofs), ("p", V.n_dofs, K.shape[0])]
    )
    return sys, V, Q


def _dense_bordered(sys):
    """Dense solve of the same problem with the constraint as a multiplier."""
    A = sys.matrix.toarray()
    n = A.shape[0]
    keep = np.setdiff1d(np.arange(n), sys.fixed)
    off, mean = sys.mean_rows[0]
    m = np.zeros(n)
    m[off : off + len(mean)] = mean
    K = np.zeros((len(keep) + 1, len(keep) + 1))
    K[:-1, :-1] = A[np.ix_(keep, keep)]
    K[:-1, -1] = m[keep]
    K[-1, :-1] = m[keep]
    x = np.zeros(n)
    x[keep] = np.linalg.solve(K, np.append(sys.rhs[keep], 0.0))[:-1]
    return x


@pytest.mark.parametrize("which", ["two_tet", "cube"])
def test_stokes_against_dense(which, two_tet_mesh, mesh1):
    mesh = two_tet_mesh if which == "two_tet" else mesh1
    sys, V, Q = _stokes_system(mesh, np.random.default_rng(0))
    x = solve_linear(sys)
    assert np.abs(x - _dense_bordered(sys)).max() <= 1e-11
    p = x[V.n_dofs :]
    assert abs(assemble_mean(Q) @ p) <= 1e-11


def test_iterative_path_matches_direct(mesh2):
    sys, _, _ = _stokes_system(mesh2, np.random.default_rng(1))
    direct = LinearSolver(direct_below=10**9).solve(sys)
    it = LinearSolver(direct_below=0)
    x = it.solve(sys)
    assert it.n_factorizations == 1
    assert np.abs(x - direct).max() <= 1e-9 * np.abs(direct).max()
    # the factorization is reused for a nearby system
    sys.rhs = sys.rhs * 1.1
    it.solve(sys)
    assert it.n_factorizations == 1


def test_singular_system_names_block():
    A = sp.csr_matrix(np.diag([1.0, 2.0, 0.0, 0.0]))
    sys = LinearSaddleSystem(A, np.ones(4), np.array([], int), np.array([]), [], [("u", 0, 2), ("B", 2, 4)])
    with pytest.raises(SingularSystemError, match="B"):
        solve_linear(sys)


# --- time stepping -----------------------------------------------------------


@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_stays_zero(mesh1, scheme):
    solver = MHDSolver(mesh1, StabParams(scheme=scheme, tau=0.1))
    state = solver.initial_state()
    for _ in range(3):
        state, diag = solver.time_step(state)
        assert not np.any(state.u.coeffs) and not np.any(state.B.coeffs)
        assert not np.any(state.p.coeffs)
        assert diag.energy == 0


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("nu", [1.0, 1e-6])
def test_energy_decays(mesh2, scheme, nu):
    solver = MHDSolver(mesh2, StabParams(scheme=scheme, nu_s=nu, nu_m=nu, tau=0.1))
    state = solver.initial_state(*random_smooth_fields(np.random.default_rng(11)))
    e = solver.energy(state)
    for _ in range(4):
        state, diag = time_step(solver, state)
        assert diag.energy <= e * (1 + 1e-12)
        e = diag.energy


def test_example1_single_step_picard_count():
    case = ManufacturedCase("example1", 1.0, 1.0)
    mesh = build_structured_tet_mesh(2)
    solver = MHDSolver(mesh, StabParams(scheme="stab3f", tau=0.25), data=case)
    state = solver.initial_state(case.u, case.B)
    new, diag = solver.time_step(state, PicardConfig(tol=1e-9))
    assert diag.picard_iters <= 10
    # regression value from the reference run
    assert diag.picard_iters == 6
    assert diag.increment <= 1e-9
    assert diag.div_l2 <= 1e-10
    assert new.t == 0.25


def test_picard_failure_reports_history(mesh2):
    case = ManufacturedCase("example1", 1.0, 1.0)
    solver = MHDSolver(mesh2, StabParams(scheme="stab3f", tau=0.25), data=case)
    state = solver.initial_state(case.u, case.B)
    with pytest.raises(PicardDivergence) as err:
        solver.time_step(state, PicardConfig(tol=1e-15, max_iters=2))
    assert len(err.value.history) == 2
    _, diag = solver.time_step(state, PicardConfig(tol=1e-15, max_iters=2, raise_on_failure=False))
    assert diag.picard_iters == 2


def test_picard_config_validation():
    with pytest.raises(ValueError):
        PicardConfig(tol=0)
    with pytest.raises(ValueError):
        PicardConfig(max_iters=0)


def test_zero_jump_weights_reduce_to_nostab(mesh2):
    rng = np.random.default_rng(3)
    a = MHDSolver(mesh2, StabParams(scheme="stab3f", mu_j1=0.0, mu_j2=0.0))
    b = MHDSolver(mesh2, StabParams(scheme="nostab"))
    s = random_state(a, rng)
    chi = FieldVector(a.V, rng.normal(size=a.V.n_dofs))
    theta = FieldVector(a.W, rng.normal(size=a.W.n_dofs))
    sa, sb = a.assemble(s, chi, theta, 0.25), b.assemble(s, chi, theta, 0.25)
    assert abs(sa.matrix - sb.matrix).max() == 0
    assert np.array_equal(sa.rhs, sb.rhs)


def test_four_field_layout(mesh1):
    s = MHDSolver(mesh1, StabParams(scheme="stab4f"))
    assert [n for n, _ in s.sizes] == ["u", "p", "B", "phi"]
    assert s.n_dofs == 54 + 6 + 24 + 8


def test_run_transient_single_step(mesh2):
    case = ManufacturedCase("example1", 1.0, 1.0)
    buf = io.StringIO()
    traj = run_transient("stab3f", case, mesh2, StabParams(), 0.25, 0.25, stream=buf)
    assert len(traj.states) == 2 and len(traj.diagnostics) == 1
    assert traj.final.t == 0.25
    lines = buf.getvalue().splitlines()
    assert lines[0] == STEP_CSV_HEADER and len(lines) == 2
    assert traj.diagnostics[0].div_l2 <= 1e-10


def test_run_transient_rejects_fractional_steps(mesh1):
    case = ManufacturedCase("example1", 1.0, 1.0)
    with pytest.raises(ValueError):
        run_transient("stab3f", case, mesh1, StabParams(), 0.3, 1.0)


@pytest.mark.parametrize("scheme", ["stab4f", "nostab"])
def test_divergence_free_every_step(mesh2, scheme):
    case = ManufacturedCase("example1", 1e-3, 1e-3)
    traj = run_transient(scheme, case, mesh2, StabParams(scheme=scheme), 0.25, 0.5)
    for d in traj.diagnostics:
        assert d.div_l2 <= 1e-10
        assert d.div_l2 <= 1e-9 * d.h1h_norm
    mean_p = assemble_mean(traj.solver.Q) @ traj.final.p.coeffs
    assert abs(mean_p) <= 1e-11
