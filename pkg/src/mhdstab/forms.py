"""Sparse assembly of the bilinear, trilinear and stabilization forms.

Every ``assemble_*`` function returns a finalized CSR matrix whose rows are
indexed by the test space and columns by the trial space. Coefficient-
dependent forms take the frozen coefficient as a :class:`FieldVector`, which
is how the Picard loop linearizes the trilinear terms.

Face conventions follow :mod:`mhdstab.mesh`: on interior faces the jump is
owner minus neighbor, on boundary faces jump and average are the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fespace import FaceTables, FESpace, FieldVector, curl, divergence

SCHEMES = ("nostab", "stab3f", "stab4f")


def quad_degree(order: int) -> int:
    return 2 * order + 2


@dataclass
class StabParams:
    nu_s: float = 1.0
    nu_m: float = 1.0
    mu_a: float = 10.0
    mu_c: float = 1.0
    mu_j1: float = 5.0
    mu_j2: float = 0.01
    mu_k: float = 0.01
    mu_y: float = 0.01
    tau: float = 0.25
    scheme: str = "stab3f"

    def __post_init__(self):
        self.scheme = self.scheme.lower()
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.nu_s <= 0 or self.nu_m <= 0:
            raise ValueError("diffusion coefficients must be positive")
        if self.mu_a <= 0:
            raise ValueError("mu_a must be positive")
        for name in ("mu_c", "mu_j1", "mu_j2", "mu_k", "mu_y"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.scheme == "stab4f" and self.mu_y <= 0:
            raise ValueError("stab4f requires mu_y > 0")
        if self.tau <= 0:
            raise ValueError("time step must be positive")


@dataclass
class SparseSystem:
    """Triplet accumulator; duplicates are summed by :meth:`finalize`."""

    shape: tuple[int, int]
    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    vals: list = field(default_factory=list)

    def add_local(self, row_dofs, col_dofs, local):
        """Add a batch of local matrices (m, nr, nc) at dofs (m, nr), (m, nc)."""
        m, nr, nc = local.shape
        self.rows.append(np.broadcast_to(row_dofs[:, :, None], (m, nr, nc)).ravel())
        self.cols.append(np.broadcast_to(col_dofs[:, None, :], (m, nr, nc)).ravel())
        self.vals.append(local.ravel())

    def finalize(self) -> sp.csr_matrix:
        if not self.vals:
            return sp.csr_matrix(self.shape)
        r = np.concatenate(self.rows)
        c = np.concatenate(self.cols)
        v = np.concatenate(self.vals)
        if r.size and (r.max() >= self.shape[0] or c.max() >= self.shape[1]):
            raise IndexError("triplet index outside the target shape")
        return sp.coo_matrix((v, (r, c)), shape=self.shape).tocsr()


def _single(test: FESpace, trial: FESpace, local, test_dofs=None, trial_dofs=None):
    s = SparseSystem((test.n_dofs, trial.n_dofs))
    s.add_local(
        test.cell_dofs if test_dofs is None else test_dofs,
        trial.cell_dofs if trial_dofs is None else trial_dofs,
        local,
    )
    return s.finalize()


def _gram(w, a, b):
    """sum_q w[m, q] a[m, q, i, ...] . b[m, q, j, ...] -> (m, i, j).

    Equivalent to an einsum over the quadrature and component axes, done as
    a batched matmul, which is much faster than the unoptimized einsum.
    """
    m, nq, ni = a.shape[:3]
    nj = b.shape[2]
    aw = (a * w.reshape(m, nq, *([1] * (a.ndim - 2)))).reshape(m, nq, ni, -1)
    bb = b.reshape(m, nq, nj, -1)
    lhs = aw.transpose(0, 2, 1, 3).reshape(m, ni, -1)
    rhs = bb.transpose(0, 1, 3, 2).reshape(m, -1, nj)
    return lhs @ rhs


def _sym_grad(g):
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def _stack_sides(ft: FaceTables):
    """Combined dofs and signed traces over both sides of interior faces.

    Returns dofs (m, 2n), jump of values (m, nq, 2n, c), jump of gradients,
    average of values and average of gradients.
    """
    o, nb = ft.owner, ft.neighbor
    dofs = np.concatenate([o.dofs, nb.dofs], axis=1)
    jv = np.concatenate([o.vals, -nb.vals], axis=2)
    jg = np.concatenate([o.grads, -nb.grads], axis=2)
    av = 0.5 * np.concatenate([o.vals, nb.vals], axis=2)
    ag = 0.5 * np.concatenate([o.grads, nb.grads], axis=2)
    return dofs, jv, jg, av, ag


# --- cell forms ----------------------------------------------------------


def assemble_mass(space: FESpace, degree: int | None = None) -> sp.csr_matrix:
    t = space.volume_tables(degree or quad_degree(space.order))
    local = _gram(t.w, t.vals, t.vals)
    return _single(space, space, local)


def assemble_aM(space: FESpace, degree: int | None = None) -> sp.csr_matrix:
    """(curl B, curl H) + (div B, div H)."""
    t = space.volume_tables(degree or quad_degree(space.order))
    cu = curl(t.grads)
    dv = divergence(t.grads)
    local = _gram(t.w, cu, cu) + _gram(t.w, dv, dv)
    return _single(space, space, local)


def assemble_curlcurl(space: FESpace, degree: int | None = None) -> sp.csr_matrix:
    t = space.volume_tables(degree or quad_degree(space.order))
    cu = curl(t.grads)
    return _single(space, space, _gram(t.w, cu, cu))


def assemble_graddiv(space: FESpace, degree: int | None = None) -> sp.csr_matrix:
    """(div B, div H) with unit weight."""
    t = space.volume_tables(degree or quad_degree(space.order))
    dv = divergence(t.grads)
    return _single(space, space, _gram(t.w, dv, dv))


def assemble_b(vspace: FESpace, qspace: FESpace, degree: int | None = None) -> sp.csr_matrix:
    """b(v, q) = (div v, q); rows in ``qspace``, columns in ``vspace``."""
    deg = degree or quad_degree(vspace.order)
    tv = vspace.volume_tables(deg)
    tq = qspace.volume_tables(deg)
    local = _gram(tv.w, tq.vals[..., 0], divergence(tv.grads))
    return _single(qspace, vspace, local)


def assemble_lorentz_d(theta: FieldVector, hspace: FESpace, vspace: FESpace, degree: int | None = None):
    """d(theta; H, v) = (curl H x theta, v); rows in ``vspace``, columns in
    ``hspace``."""
    deg = degree or quad_degree(vspace.order)
    th, _ = theta.on_volume(deg)
    tv = vspace.volume_tables(deg)
    th_tab = hspace.volume_tables(deg)
    cu = curl(th_tab.grads)  # (m, q, j, 3)
    cross = np.cross(cu, th[:, :, None, :])
    local = _gram(tv.w, tv.vals, cross)
    return _single(vspace, hspace, local)


def coefficient_linf(field: FieldVector, degree: int | None = None) -> np.ndarray:
    """Per-tet max of |field| over volume quadrature points and vertices."""
    deg = degree or quad_degree(field.space.order)
    vals, _ = field.on_volume(deg)
    qmax = np.linalg.norm(vals, axis=-1).max(axis=1)
    vtx, _ = field.at(np.arange(field.space.mesh.n_tets), np.eye(4))
    return np.maximum(qmax, np.linalg.norm(vtx, axis=-1).max(axis=1))


def face_linf_weight(field: FieldVector | None, faces: np.ndarray, mesh) -> np.ndarray:
    """max{||field||^2_{L^inf(omega_f)}, 1} per face."""
    if field is None:
        return np.ones(len(faces))
    cell = coefficient_linf(field)
    fc = mesh.face_cells[faces]
    m = np.where(fc >= 0, cell[np.maximum(fc, 0)], 0.0).max(axis=1)
    return np.maximum(m**2, 1.0)


# --- DG / face forms -----------------------------------------------------


def assemble_asip(vspace: FESpace, mu_a: float, degree: int | None = None) -> sp.csr_matrix:
    """Symmetric interior penalty form over all faces."""
    deg = degree or quad_degree(vspace.order)
    s = SparseSystem((vspace.n_dofs, vspace.n_dofs))
    t = vspace.volume_tables(deg)
    eps = _sym_grad(t.grads)
    s.add_local(vspace.cell_dofs, vspace.cell_dofs, _gram(t.w, eps, eps))

    ft = vspace.face_tables(deg)
    dofs, jv, jg, av, ag = _stack_sides(ft)
    s.add_local(dofs, dofs, _sip_face_local(ft, jv, _sym_grad(ag), mu_a))

    fb = vspace.face_tables(deg, boundary=True)
    o = fb.owner
    s.add_local(o.dofs, o.dofs, _sip_face_local(fb, o.vals, _sym_grad(o.grads), mu_a))
    return s.finalize()


def _sip_face_local(ft, jv, avg_eps, mu_a):
    en = np.einsum("mqicd,md->mqic", avg_eps, ft.normals)
    cons = np.swapaxes(_gram(ft.w, en, jv), 1, 2)  # -( {eps(u_j) n}, [v_i] )
    pen = _gram(ft.w, jv, jv) * (mu_a / ft.hf)[:, None, None]
    return pen - cons - np.swapaxes(cons, 1, 2)


def assemble_convection_upwind(vspace: FESpace, chi: FieldVector, mu_c: float, degree: int | None = None):
    """c_h(chi; u, v) with upwind jump penalty on interior faces."""
    deg = degree or quad_degree(vspace.order)
    s = SparseSystem((vspace.n_dofs, vspace.n_dofs))
    t = vspace.volume_tables(deg)
    cv, _ = chi.on_volume(deg)
    adv = np.einsum("mqjcd,mqd->mqjc", t.grads, cv, optimize=True)
    s.add_local(vspace.cell_dofs, vspace.cell_dofs, _gram(t.w, t.vals, adv))

    ft = vspace.face_tables(deg)
    cache = vspace.__dict__.setdefault("_stack_cache", {})
    if deg not in cache:
        cache[deg] = _stack_sides(ft)
    dofs, jv, _, av, _ = cache[deg]
    chin = _face_normal_flux(chi, deg)
    central = _gram(ft.w * chin, av, jv)
    upw = _gram(ft.w * np.abs(chin), jv, jv)
    s.add_local(dofs, dofs, mu_c * upw - central)
    return s.finalize()


def _face_normal_flux(chi: FieldVector, degree: int) -> np.ndarray:
    """chi . n_f at interior-face quadrature points (mean of both traces)."""
    ft = chi.space.face_tables(degree)
    c = chi.coeffs
    v0 = np.einsum("mqjc,mj->mqc", ft.owner.vals, c[ft.owner.dofs])
    v1 = np.einsum("mqjc,mj->mqc", ft.neighbor.vals, c[ft.neighbor.dofs])
    return np.einsum("mqc,mc->mq", 0.5 * (v0 + v1), ft.normals)


def _jump_locals(space: FESpace, degree: int):
    """Unweighted per-face value-jump and gradient-jump local matrices on
    interior faces, cached on the space."""
    cache = space.__dict__.setdefault("_jump_cache", {})
    if degree not in cache:
        ft = space.face_tables(degree)
        dofs, jv, jg, _, _ = _stack_sides(ft)
        val = _gram(ft.w, jv, jv)
        grad = _gram(ft.w, jg, jg)
        cache[degree] = (dofs, val, grad, ft)
    return cache[degree]


def assemble_Jh(vspace: FESpace, theta: FieldVector | None, mu_j1: float, mu_j2: float, degree: int | None = None):
    """CIP jump and gradient-jump penalty weighted by max{|theta|^2, 1}."""
    deg = degree or quad_degree(vspace.order)
    dofs, val, grad, ft = _jump_locals(vspace, deg)
    wf = face_linf_weight(theta, ft.faces, vspace.mesh)
    local = wf[:, None, None] * (mu_j1 * val + mu_j2 * (ft.hf**2)[:, None, None] * grad)
    s = SparseSystem((vspace.n_dofs, vspace.n_dofs))
    s.add_local(dofs, dofs, local)
    return s.finalize()


def assemble_Kh(wspace: FESpace, chi: FieldVector | None, mu_k: float, degree: int | None = None):
    """Gradient-jump penalty weighted by h_f^2 max{|chi|^2, 1}."""
    deg = degree or quad_degree(wspace.order)
    dofs, _, grad, ft = _jump_locals(wspace, deg)
    wf = face_linf_weight(chi, ft.faces, wspace.mesh)
    local = (mu_k * wf * ft.hf**2)[:, None, None] * grad
    s = SparseSystem((wspace.n_dofs, wspace.n_dofs))
    s.add_local(dofs, dofs, local)
    return s.finalize()


def assemble_Yh(rspace: FESpace, mu_y: float, degree: int | None = None):
    """mu_Y sum_f h_f^2 ([grad phi], [grad psi])_f on interior faces."""
    return assemble_Kh(rspace, None, mu_y, degree)


# --- load vectors --------------------------------------------------------


def assemble_load(space: FESpace, fn, t: float, degree: int | None = None) -> np.ndarray:
    """(fn(., t), v_i) for every basis function."""
    tab = space.volume_tables(degree or quad_degree(space.order))
    fv = np.asarray(fn(tab.x.reshape(-1, 3), t)).reshape(tab.x.shape[:2] + (space.ncomp,))
    local = np.einsum("mq,mqic,mqc->mi", tab.w, tab.vals, fv)
    return np.bincount(space.cell_dofs.ravel(), local.ravel(), minlength=space.n_dofs)


def assemble_nitsche_data(vspace: FESpace, g, t: float, mu_a: float, degree: int | None = None) -> np.ndarray:
    """Right-hand side of the SIP boundary terms with [u] replaced by u - g:
    sum_f -(g, eps(v) n)_f + mu_a h_f^{-1} (g, v)_f over boundary faces."""
    deg = degree or quad_degree(vspace.order)
    fb = vspace.face_tables(deg, boundary=True)
    o = fb.owner
    gv = np.asarray(g(fb.x.reshape(-1, 3), t)).reshape(fb.x.shape)
    en = np.einsum("mqicd,md->mqic", _sym_grad(o.grads), fb.normals)
    local = -np.einsum("mq,mqc,mqic->mi", fb.w, gv, en)
    local += np.einsum("mq,mqc,mqic->mi", fb.w, gv, o.vals) * (mu_a / fb.hf)[:, None]
    return np.bincount(o.dofs.ravel(), local.ravel(), minlength=vspace.n_dofs)


def assemble_boundary_load(space: FESpace, fn, t: float, degree: int | None = None) -> np.ndarray:
    """sum over boundary faces of (fn(x, n, t), v_i)_f."""
    deg = degree or quad_degree(space.order)
    fb = space.face_tables(deg, boundary=True)
    o = fb.owner
    nq = fb.x.shape[1]
    n = np.repeat(fb.normals, nq, axis=0)
    gv = np.asarray(fn(fb.x.reshape(-1, 3), n, t)).reshape(fb.x.shape)
    local = np.einsum("mq,mqc,mqic->mi", fb.w, gv, o.vals)
    return np.bincount(o.dofs.ravel(), local.ravel(), minlength=space.n_dofs)


def assemble_mean(space: FESpace, degree: int | None = None) -> np.ndarray:
    """Row vector of basis integrals, used for the zero-mean constraint."""
    tab = space.volume_tables(degree or quad_degree(space.order))
    local = np.einsum("mq,mqi->mi", tab.w, tab.vals[..., 0])
    return np.bincount(space.cell_dofs.ravel(), local.ravel(), minlength=space.n_dofs)
