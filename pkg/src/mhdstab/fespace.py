"""Discrete spaces: BDM_k velocity, P_{k-1} DG pressure, continuous P_k
vector magnetic field and continuous P_k scalar multiplier.

All bases are written in barycentric coordinates of each (affine) tet, so
basis values at a quadrature point depend only on its barycentric
coordinates and gradients come from the per-tet barycentric gradients.

The BDM_k basis is built element by element on the physical tet: the local
space is the full [P_k]^3, and its degrees of freedom are

* face moments ``|f|^{-1} (v . n_f, q)_f`` against a basis of P_k(f) written
  in the face's barycentric coordinates ordered by ascending global vertex
  id, with ``n_f`` the mesh's global face normal;
* for k = 2, interior moments against the lowest-order Nedelec functions
  ``h_E (l_i grad l_j - l_j grad l_i)``.

Both incident tets therefore agree on what each face dof means, which makes
the normal trace single valued. The nodal basis is the inverse of the
per-tet dual matrix applied to the raw [P_k]^3 basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mesh import LOCAL_EDGES, LOCAL_FACES, Mesh
from .quadrature import tet_rule, tri_rule

BDM = "bdm"
DG = "dg"
CG_VECTOR = "cg_vector"
CG_SCALAR = "cg_scalar"

# rule used when applying dof functionals to analytic fields; high enough
# that the BDM commuting property holds to round-off on smooth data
INTERP_DEGREE = 14


class FESpaceError(ValueError):
    pass


def lagrange_bary(order: int, bary: np.ndarray):
    """Lagrange basis of degree ``order`` on a simplex in barycentric form.

    ``bary`` has shape (..., d + 1). Returns values (..., nb) and derivatives
    with respect to each barycentric coordinate (..., nb, d + 1). Ordering:
    vertices, then edges (i < j, lexicographic).
    """
    nbary = bary.shape[-1]
    shape = bary.shape[:-1]
    if order == 0:
        return np.ones(shape + (1,)), np.zeros(shape + (1, nbary))
    if order == 1:
        d = np.broadcast_to(np.eye(nbary), shape + (nbary, nbary)).copy()
        return bary.copy(), d
    if order == 2:
        pairs = [(i, j) for i in range(nbary) for j in range(i + 1, nbary)]
        nb = nbary + len(pairs)
        vals = np.empty(shape + (nb,))
        d = np.zeros(shape + (nb, nbary))
        for i in range(nbary):
            li = bary[..., i]
            vals[..., i] = li * (2 * li - 1)
            d[..., i, i] = 4 * li - 1
        for e, (i, j) in enumerate(pairs):
            vals[..., nbary + e] = 4 * bary[..., i] * bary[..., j]
            d[..., nbary + e, i] = 4 * bary[..., j]
            d[..., nbary + e, j] = 4 * bary[..., i]
        return vals, d
    raise FESpaceError(f"unsupported polynomial order {order}")


def _n_lagrange(order, nbary):
    return 1 if order == 0 else len(lagrange_bary(order, np.ones((1, nbary)) / nbary)[0][0])


@dataclass
class VolumeTables:
    x: np.ndarray  # (nt, nq, 3)
    w: np.ndarray  # (nt, nq) physical weights
    vals: np.ndarray  # (nt, nq, nloc, ncomp)
    grads: np.ndarray  # (nt, nq, nloc, ncomp, 3)


@dataclass
class FaceSide:
    cells: np.ndarray  # (m,)
    dofs: np.ndarray  # (m, nloc)
    vals: np.ndarray  # (m, nq, nloc, ncomp)
    grads: np.ndarray  # (m, nq, nloc, ncomp, 3)


@dataclass
class FaceTables:
    faces: np.ndarray  # (m,) global face ids
    x: np.ndarray  # (m, nq, 3)
    w: np.ndarray  # (m, nq)
    normals: np.ndarray  # (m, 3)
    hf: np.ndarray  # (m,)
    owner: FaceSide
    neighbor: FaceSide | None  # None for boundary faces


def face_quadrature(mesh: Mesh, faces: np.ndarray, degree: int, *, unchecked=False):
    """Face-barycentric points (nq, 3), physical points and weights."""
    rule = tri_rule(degree, unchecked=unchecked)
    mu = rule.bary
    verts = mesh.vertices[mesh.faces[faces]]  # (m, 3, 3)
    x = np.einsum("qa,mad->mqd", mu, verts)
    w = rule.weights[None, :] * (2.0 * mesh.face_areas[faces])[:, None]
    return mu, x, w


def face_to_tet_bary(mesh: Mesh, faces: np.ndarray, side: int, mu: np.ndarray):
    """Tet barycentric coordinates (m, nq, 4) of face points seen from
    ``side`` (0 owner, 1 neighbor)."""
    pos = mesh.face_cell_vertex_index[faces, side]  # (m, 3)
    bary = np.zeros((len(faces), mu.shape[0], 4))
    rows = np.arange(len(faces))
    for j in range(3):
        bary[rows, :, pos[:, j]] = mu[:, j]
    return bary


class FESpace:
    """A finite element space on a tetrahedral mesh.

    ``vals``/``grads`` conventions: ``grads[..., c, d]`` is the derivative of
    component ``c`` in direction ``d``.
    """

    def __init__(self, mesh: Mesh, kind: str, order: int, *, normal_bc: bool = False):
        self.mesh = mesh
        self.kind = kind
        self.order = order
        self.normal_bc = normal_bc
        self._vol_cache: dict[int, VolumeTables] = {}
        self._face_cache: dict[tuple, FaceTables] = {}
        if kind == BDM:
            if order not in (1, 2):
                raise FESpaceError(f"BDM order must be 1 or 2, got {order}")
            self.ncomp = 3
            self._scalar_order = order
            self._init_bdm()
        elif kind == DG:
            if order < 1 or order > 2:
                raise FESpaceError(f"pressure space order must be 1 or 2, got {order}")
            self.ncomp = 1
            self._scalar_order = order - 1
            nb = _n_lagrange(order - 1, 4)
            self.cell_dofs = np.arange(mesh.n_tets * nb).reshape(mesh.n_tets, nb)
            self.n_dofs = mesh.n_tets * nb
        elif kind in (CG_VECTOR, CG_SCALAR):
            if order not in (1, 2):
                raise FESpaceError(f"continuous space order must be 1 or 2, got {order}")
            self.ncomp = 3 if kind == CG_VECTOR else 1
            self._scalar_order = order
            nodes = self._cell_nodes
            if kind == CG_VECTOR:
                self.cell_dofs = (3 * nodes[:, :, None] + np.arange(3)).reshape(mesh.n_tets, -1)
                self.n_dofs = 3 * self.n_nodes
            else:
                self.cell_dofs = nodes
                self.n_dofs = self.n_nodes
        else:
            raise FESpaceError(f"unknown space kind {kind!r}")
        self.cell_dofs.setflags(write=False)
        self.constrained_dofs = self._find_constrained()

    def __repr__(self):
        return f"FESpace({self.kind}, k={self.order}, n_dofs={self.n_dofs})"

    @property
    def nloc(self) -> int:
        return self.cell_dofs.shape[1]

    # --- Lagrange nodes --------------------------------------------------

    @cached_property
    def _cell_nodes(self) -> np.ndarray:
        m = self.mesh
        if self._scalar_order == 1:
            return m.tets
        return np.hstack([m.tets, m.n_vertices + m.tet_to_edges])

    @property
    def n_nodes(self) -> int:
        m = self.mesh
        return m.n_vertices + (len(m.edges) if self._scalar_order == 2 else 0)

    @cached_property
    def node_coords(self) -> np.ndarray:
        m = self.mesh
        if self._scalar_order == 1:
            return m.vertices
        mid = m.vertices[m.edges].mean(axis=1)
        return np.vstack([m.vertices, mid])

    # --- BDM construction ------------------------------------------------

    def _init_bdm(self):
        mesh, k = self.mesh, self.order
        nt = mesh.n_tets
        self.face_ndofs = _n_lagrange(k, 3)
        self.interior_ndofs = 0 if k == 1 else 6
        nfd, nid = self.face_ndofs, self.interior_ndofs
        nb = _n_lagrange(k, 4)
        nloc = 3 * nb
        assert nloc == 4 * nfd + nid

        face_dofs = mesh.tet_to_faces[:, :, None] * nfd + np.arange(nfd)
        dofs = [face_dofs.reshape(nt, -1)]
        if nid:
            dofs.append(mesh.n_faces * nfd + np.arange(nt * nid).reshape(nt, nid))
        self.cell_dofs = np.hstack(dofs)
        self.n_dofs = mesh.n_faces * nfd + nt * nid

        D = np.zeros((nt, nloc, nloc))
        rule = tri_rule(2 * k)
        mu = rule.bary
        wn = rule.normalized_weights
        qvals, _ = lagrange_bary(k, mu)  # (nq, nfd)
        normals = mesh.face_normals[mesh.tet_to_faces]  # (nt, 4, 3)
        for lf in range(4):
            gl = mesh.tets[:, LOCAL_FACES[lf]]
            pos = LOCAL_FACES[lf][np.argsort(gl, axis=1)]  # (nt, 3)
            bary = np.zeros((nt, len(wn), 4))
            for j in range(3):
                bary[np.arange(nt), :, pos[:, j]] = mu[:, j]
            phi, _ = lagrange_bary(k, bary)  # (nt, nq, nb)
            # dof (lf, j) applied to raw function (a, c): sum_q w phi_a n_c q_j
            block = np.einsum("q,tqa,tc,qj->tjac", wn, phi, normals[:, lf], qvals)
            D[:, lf * nfd : (lf + 1) * nfd, :] = block.reshape(nt, nfd, nloc)
        if nid:
            trule = tet_rule(2 * k)
            phi, _ = lagrange_bary(k, trule.bary)
            wq = trule.normalized_weights
            G = mesh.bary_gradients
            hE = mesh.tet_diameters
            lam = trule.bary
            for e, (i, j) in enumerate(LOCAL_EDGES):
                ned = (lam[None, :, i, None] * G[:, None, j, :] - lam[None, :, j, None] * G[:, None, i, :]) * hE[:, None, None]
                D[:, 4 * nfd + e, :] = np.einsum("q,qa,tqc->tac", wq, phi, ned).reshape(nt, nloc)
        self._bdm_coeffs = np.linalg.inv(D).reshape(nt, nb, 3, nloc)

    # --- constraints -----------------------------------------------------

    def _boundary_axes(self):
        """For each boundary face, the axis of its (axis-aligned) normal."""
        mesh = self.mesh
        n = mesh.face_normals[mesh.boundary_faces]
        axis = np.argmax(np.abs(n), axis=1)
        if np.any(np.abs(np.abs(n[np.arange(len(n)), axis]) - 1.0) > 1e-10):
            raise FESpaceError("unsupported geometry: normal_bc needs an axis-aligned boundary")
        return axis

    def _boundary_face_nodes(self):
        """Lagrange nodes on each boundary face, shape (nbf, nnodes_face)."""
        mesh = self.mesh
        bf = mesh.boundary_faces
        fv = mesh.faces[bf]
        if self._scalar_order == 1:
            return fv
        edges = mesh.edges
        # edge ids of a face via lookup in the sorted edge table
        key = edges[:, 0] * mesh.n_vertices + edges[:, 1]
        order = np.argsort(key)
        cols = []
        for a, b in [(0, 1), (0, 2), (1, 2)]:
            k2 = fv[:, a] * mesh.n_vertices + fv[:, b]
            cols.append(mesh.n_vertices + order[np.searchsorted(key[order], k2)])
        return np.column_stack([fv] + cols)

    def _find_constrained(self) -> np.ndarray:
        mesh = self.mesh
        if self.kind == BDM:
            bf = mesh.boundary_faces
            return (bf[:, None] * self.face_ndofs + np.arange(self.face_ndofs)).ravel()
        if self.kind == CG_VECTOR and self.normal_bc:
            axis = self._boundary_axes()
            nodes = self._boundary_face_nodes()
            dofs = 3 * nodes + axis[:, None]
            return np.unique(dofs)
        return np.zeros(0, dtype=np.int64)

    def boundary_values(self, field, t: float = 0.0) -> np.ndarray:
        """Values of the constrained dofs for Dirichlet data ``field(x, t)``."""
        if len(self.constrained_dofs) == 0:
            return np.zeros(0)
        if self.kind == BDM:
            return self._bdm_face_moments(field, t, self.mesh.boundary_faces).ravel()
        x = self.node_coords[self.constrained_dofs // 3]
        g = np.asarray(field(x, t)).reshape(-1, 3)
        return g[np.arange(len(x)), self.constrained_dofs % 3]

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.constrained_dofs] = False
        return np.flatnonzero(mask)

    # --- basis evaluation ------------------------------------------------

    def basis(self, cells: np.ndarray, bary: np.ndarray):
        """Basis values and gradients at barycentric points of ``cells``.

        ``bary`` is (nq, 4) shared by all cells or (len(cells), nq, 4).
        Returns vals (m, nq, nloc, ncomp) and grads (m, nq, nloc, ncomp, 3).
        """
        cells = np.asarray(cells)
        m = len(cells)
        phi, dphi = lagrange_bary(self._scalar_order, bary)
        G = self.mesh.bary_gradients[cells]  # (m, 4, 3)
        if bary.ndim == 2:
            phi = np.broadcast_to(phi, (m,) + phi.shape)
            gphi = np.einsum("qab,mbd->mqad", dphi, G)
        else:
            gphi = np.einsum("mqab,mbd->mqad", dphi, G)
        nq, nb = phi.shape[1], phi.shape[2]
        if self.kind == BDM:
            A = self._bdm_coeffs[cells]  # (m, nb, 3, nloc)
            vals = np.einsum("mqa,macj->mqjc", phi, A)
            grads = np.einsum("mqad,macj->mqjcd", gphi, A)
            return vals, grads
        if self.kind == CG_VECTOR:
            eye = np.eye(3)
            vals = np.einsum("mqa,ce->mqace", phi, eye).reshape(m, nq, 3 * nb, 3)
            grads = np.einsum("mqad,ce->mqaced", gphi, eye).reshape(m, nq, 3 * nb, 3, 3)
            return vals, grads
        return phi[..., None].copy(), gphi[..., None, :]

    def volume_tables(self, degree: int) -> VolumeTables:
        if degree not in self._vol_cache:
            mesh = self.mesh
            rule = tet_rule(degree)
            cells = np.arange(mesh.n_tets)
            vals, grads = self.basis(cells, rule.bary)
            x = mesh.to_physical(cells, rule.bary)
            w = rule.weights[None, :] * (6.0 * mesh.volumes)[:, None]
            self._vol_cache[degree] = VolumeTables(x, w, vals, grads)
        return self._vol_cache[degree]

    def face_tables(self, degree: int, boundary: bool = False) -> FaceTables:
        key = (degree, boundary)
        if key not in self._face_cache:
            mesh = self.mesh
            faces = mesh.boundary_faces if boundary else mesh.interior_faces
            mu, x, w = face_quadrature(mesh, faces, degree)
            sides = []
            for side in (0,) if boundary else (0, 1):
                cells = mesh.face_cells[faces, side]
                bary = face_to_tet_bary(mesh, faces, side, mu)
                vals, grads = self.basis(cells, bary)
                sides.append(FaceSide(cells, self.cell_dofs[cells], vals, grads))
            self._face_cache[key] = FaceTables(
                faces, x, w, mesh.face_normals[faces], mesh.face_diameters[faces],
                sides[0], None if boundary else sides[1],
            )
        return self._face_cache[key]

    # --- interpolation ---------------------------------------------------

    def _bdm_face_moments(self, field, t, faces):
        mesh = self.mesh
        mu, x, _ = face_quadrature(mesh, faces, INTERP_DEGREE, unchecked=True)
        wn = tri_rule(INTERP_DEGREE, unchecked=True).normalized_weights
        q, _ = lagrange_bary(self.order, mu)
        vals = np.asarray(field(x.reshape(-1, 3), t)).reshape(len(faces), -1, 3)
        un = np.einsum("fqd,fd->fq", vals, mesh.face_normals[faces])
        return np.einsum("q,fq,qj->fj", wn, un, q)

    def interpolate(self, field, t: float = 0.0) -> "FieldVector":
        """Canonical interpolant of ``field(x, t)`` (x of shape (n, 3)).

        BDM: face and interior moments; CG: nodal values; DG: elementwise L2
        projection.
        """
        mesh = self.mesh
        c = np.zeros(self.n_dofs)
        if self.kind == BDM:
            faces = np.arange(mesh.n_faces)
            c[: mesh.n_faces * self.face_ndofs] = self._bdm_face_moments(field, t, faces).ravel()
            if self.interior_ndofs:
                rule = tet_rule(INTERP_DEGREE, unchecked=True)
                lam = rule.bary
                cells = np.arange(mesh.n_tets)
                x = mesh.to_physical(cells, lam)
                vals = np.asarray(field(x.reshape(-1, 3), t)).reshape(mesh.n_tets, -1, 3)
                G = mesh.bary_gradients
                hE = mesh.tet_diameters
                wn = rule.normalized_weights
                mom = np.empty((mesh.n_tets, 6))
                for e, (i, j) in enumerate(LOCAL_EDGES):
                    ned = (lam[None, :, i, None] * G[:, None, j, :] - lam[None, :, j, None] * G[:, None, i, :]) * hE[:, None, None]
                    mom[:, e] = np.einsum("q,tqc,tqc->t", wn, vals, ned)
                c[mesh.n_faces * self.face_ndofs :] = mom.ravel()
        elif self.kind == CG_VECTOR:
            c[:] = np.asarray(field(self.node_coords, t)).reshape(-1)
        elif self.kind == CG_SCALAR:
            c[:] = np.asarray(field(self.node_coords, t)).reshape(-1)
        else:
            rule = tet_rule(2 * self.order + 4, unchecked=True)
            cells = np.arange(mesh.n_tets)
            vals, _ = self.basis(cells[:1], rule.bary)
            phi = vals[0, :, :, 0]  # (nq, nb) identical on every tet
            x = mesh.to_physical(cells, rule.bary)
            fv = np.asarray(field(x.reshape(-1, 3), t)).reshape(mesh.n_tets, -1)
            M = np.einsum("q,qa,qb->ab", rule.weights, phi, phi)
            rhs = np.einsum("q,qa,tq->ta", rule.weights, phi, fv)
            c[:] = np.linalg.solve(M, rhs.T).T.ravel()
        return FieldVector(self, c)

    def zero(self) -> "FieldVector":
        return FieldVector(self, np.zeros(self.n_dofs))


@dataclass
class FieldVector:
    space: FESpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.n_dofs,):
            raise FESpaceError(
                f"coefficient length {self.coeffs.shape} does not match space size {self.space.n_dofs}"
            )

    def copy(self) -> "FieldVector":
        return FieldVector(self.space, self.coeffs.copy())

    def at(self, cells, bary):
        """Values (m, nq, ncomp) and gradients (m, nq, ncomp, 3)."""
        vals, grads = self.space.basis(cells, bary)
        c = self.coeffs[self.space.cell_dofs[cells]]
        return np.einsum("mqjc,mj->mqc", vals, c, optimize=True), np.einsum("mqjcd,mj->mqcd", grads, c, optimize=True)

    def on_volume(self, degree: int):
        """Values and gradients at the cached volume quadrature points."""
        tab = self.space.volume_tables(degree)
        c = self.coeffs[self.space.cell_dofs]
        return np.einsum("mqjc,mj->mqc", tab.vals, c, optimize=True), np.einsum("mqjcd,mj->mqcd", tab.grads, c, optimize=True)


def divergence(grads: np.ndarray) -> np.ndarray:
    return np.trace(grads, axis1=-2, axis2=-1)


def curl(grads: np.ndarray) -> np.ndarray:
    g = grads
    return np.stack(
        [g[..., 2, 1] - g[..., 1, 2], g[..., 0, 2] - g[..., 2, 0], g[..., 1, 0] - g[..., 0, 1]],
        axis=-1,
    )


def evaluate(field: FieldVector, tet: int, ref_point) -> dict:
    """Value, gradient, divergence and curl of a discrete field at a point.

    ``ref_point`` is a point of the reference tet {x, y, z >= 0, x+y+z <= 1};
    it is mapped through the tet's affine map with vertex 0 at the origin.
    """
    xi = np.asarray(ref_point, dtype=float)
    bary = np.array([[1.0 - xi.sum(), *xi]])
    vals, grads = field.at(np.array([tet]), bary)
    v, g = vals[0, 0], grads[0, 0]
    out = {"value": v if len(v) > 1 else v[0], "gradient": g if len(v) > 1 else g[0]}
    if field.space.ncomp == 3:
        out["divergence"] = float(divergence(g))
        out["curl"] = curl(g)
    return out


def build_bdm_space(mesh: Mesh, k: int) -> FESpace:
    return FESpace(mesh, BDM, k)


def build_cg_vector_space(mesh: Mesh, k: int, normal_bc: bool = True) -> FESpace:
    return FESpace(mesh, CG_VECTOR, k, normal_bc=normal_bc)


def build_pressure_space(mesh: Mesh, k: int) -> FESpace:
    return FESpace(mesh, DG, k)


def build_multiplier_space(mesh: Mesh, k: int) -> FESpace:
    return FESpace(mesh, CG_SCALAR, k)
