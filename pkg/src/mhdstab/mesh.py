"""Conforming tetrahedral meshes with face connectivity.

Faces carry a fixed unit normal. On boundary faces it points out of the
domain; on interior faces it is the outward normal of the owner tet, so the
jump of a piecewise field across a face is ``owner trace - neighbor trace``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# local face i is opposite local vertex i
LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


class MeshError(ValueError):
    pass


def _signed_volumes(vertices, tets):
    p = vertices[tets]
    d = p[:, 1:, :] - p[:, :1, :]
    return np.linalg.det(d) / 6.0


@dataclass(eq=False)
class Mesh:
    """Immutable tetrahedral mesh.

    Only ``vertices`` and ``tets`` are inputs; everything else is derived on
    construction. Tets are reordered to positive orientation.
    """

    vertices: np.ndarray
    tets: np.ndarray
    faces: np.ndarray = field(init=False)
    face_cells: np.ndarray = field(init=False)
    face_local: np.ndarray = field(init=False)
    tet_to_faces: np.ndarray = field(init=False)
    tet_face_sign: np.ndarray = field(init=False)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        tets = np.array(self.tets, dtype=np.int64, copy=True)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError("vertices must have shape (n, 3)")
        if tets.size == 0:
            raise MeshError("no elements")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise MeshError("tets must have shape (n, 4)")
        if tets.min() < 0 or tets.max() >= len(vertices):
            raise MeshError("vertex id out of range")
        vol = _signed_volumes(vertices, tets)
        neg = vol < 0
        tets[neg, 0], tets[neg, 1] = tets[neg, 1].copy(), tets[neg, 0].copy()
        vol = np.abs(vol)
        if np.any(vol <= 1e-14 * np.max(vol)):
            raise MeshError("degenerate tetrahedron")
        vertices.setflags(write=False)
        tets.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "tets", tets)
        self._build_faces()

    def _build_faces(self):
        nt = len(self.tets)
        local = self.tets[:, LOCAL_FACES]  # (nt, 4, 3)
        keys = np.sort(local.reshape(-1, 3), axis=1)
        faces, first, inverse, counts = np.unique(
            keys, axis=0, return_index=True, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            raise MeshError("non-conforming input: a face is shared by more than two tets")
        face_cells = -np.ones((len(faces), 2), dtype=np.int64)
        face_local = -np.ones((len(faces), 2), dtype=np.int64)
        face_cells[:, 0] = first // 4
        face_local[:, 0] = first % 4
        second = np.setdiff1d(np.arange(4 * nt), first, assume_unique=True)
        fid = inverse[second]
        face_cells[fid, 1] = second // 4
        face_local[fid, 1] = second % 4
        tet_to_faces = inverse.reshape(nt, 4)
        sign = np.ones((nt, 4), dtype=np.int64)
        sign[face_cells[fid, 1], face_local[fid, 1]] = -1
        for name, arr in [
            ("faces", faces),
            ("face_cells", face_cells),
            ("face_local", face_local),
            ("tet_to_faces", tet_to_faces),
            ("tet_face_sign", sign),
        ]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # --- sizes -----------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    # --- cell geometry ---------------------------------------------------

    @cached_property
    def volumes(self) -> np.ndarray:
        return _signed_volumes(self.vertices, self.tets)

    @cached_property
    def tet_diameters(self) -> np.ndarray:
        p = self.vertices[self.tets]
        e = p[:, LOCAL_EDGES[:, 1]] - p[:, LOCAL_EDGES[:, 0]]
        return np.linalg.norm(e, axis=2).max(axis=1)

    @cached_property
    def h(self) -> float:
        return float(self.tet_diameters.max())

    @cached_property
    def jacobians(self) -> np.ndarray:
        """Columns are edge vectors from vertex 0, shape (nt, 3, 3)."""
        p = self.vertices[self.tets]
        return np.transpose(p[:, 1:, :] - p[:, :1, :], (0, 2, 1))

    @cached_property
    def bary_gradients(self) -> np.ndarray:
        """Gradients of the four barycentric coordinates, shape (nt, 4, 3)."""
        jinv = np.linalg.inv(self.jacobians)  # rows: grad of lambda_1..3
        g = np.empty((self.n_tets, 4, 3))
        g[:, 1:, :] = jinv
        g[:, 0, :] = -jinv.sum(axis=1)
        return g

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    def to_physical(self, cells, bary) -> np.ndarray:
        """Map barycentric points to physical coordinates.

        ``bary`` is (nq, 4) shared by all cells or (len(cells), nq, 4).
        """
        p = self.vertices[self.tets[cells]]  # (m, 4, 3)
        if bary.ndim == 2:
            return np.einsum("qa,mad->mqd", bary, p)
        return np.einsum("mqa,mad->mqd", bary, p)

    # --- face geometry ---------------------------------------------------

    @cached_property
    def is_boundary(self) -> np.ndarray:
        return self.face_cells[:, 1] < 0

    @cached_property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(~self.is_boundary)

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.is_boundary)

    @cached_property
    def face_areas(self) -> np.ndarray:
        p = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @cached_property
    def face_diameters(self) -> np.ndarray:
        p = self.vertices[self.faces]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 2] - p[:, 1]], axis=1)
        return np.linalg.norm(e, axis=2).max(axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        p = self.vertices[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        n /= np.linalg.norm(n, axis=1)[:, None]
        # orient outward from the owner: away from the opposite vertex
        owner = self.face_cells[:, 0]
        opp = self.vertices[self.tets[owner, self.face_local[:, 0]]]
        flip = np.einsum("fd,fd->f", n, p[:, 0] - opp) < 0
        n[flip] *= -1
        return n

    @cached_property
    def face_cell_vertex_index(self) -> np.ndarray:
        """Local positions of each face's (sorted) vertices inside the
        owner (side 0) and neighbor (side 1) tets, shape (nf, 2, 3).
        Entries for missing neighbors are -1."""
        out = -np.ones((self.n_faces, 2, 3), dtype=np.int64)
        for side in (0, 1):
            mask = self.face_cells[:, side] >= 0
            cells = self.tets[self.face_cells[mask, side]]  # (m, 4)
            fv = self.faces[mask]  # (m, 3)
            out[mask, side] = np.argmax(cells[:, None, :] == fv[:, :, None], axis=2)
        return out

    def face_patch_tets(self, face_id: int) -> list[int]:
        if not 0 <= face_id < self.n_faces:
            raise IndexError(f"face id {face_id} out of range")
        return [int(c) for c in self.face_cells[face_id] if c >= 0]

    @cached_property
    def shape_ratio(self) -> float:
        """max over faces of h_E / h_f for the incident tets."""
        hE = self.tet_diameters[self.face_cells]
        hE = np.where(self.face_cells >= 0, hE, 0.0).max(axis=1)
        return float(np.max(hE / self.face_diameters))

    # --- edges (used by P2 spaces) ---------------------------------------

    @cached_property
    def _edge_data(self):
        loc = self.tets[:, LOCAL_EDGES]  # (nt, 6, 2)
        keys = np.sort(loc.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        return edges, inverse.reshape(self.n_tets, 6)

    @property
    def edges(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def tet_to_edges(self) -> np.ndarray:
        return self._edge_data[1]

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.tets).tobytes())
        return h.hexdigest()


def build_structured_tet_mesh(n: int) -> Mesh:
    """Kuhn subdivision of the unit cube: n^3 subcubes, 6 tets each."""
    if n < 1:
        raise MeshError("n must be >= 1")
    g = np.linspace(0.0, 1.0, n + 1)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    I, J, K = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    unit = np.eye(3, dtype=np.int64)
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=np.int64)
        path = [vid(I, J, K)]
        for axis in perm:
            corner = corner + unit[axis]
            path.append(vid(I + corner[0], J + corner[1], K + corner[2]))
        tets.append(np.column_stack(path))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return Mesh(vertices, tets)


def _data_lines(text):
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line.split()


def read_tetgen_mesh(node_text: str, ele_text: str) -> Mesh:
    """Parse tetgen ``.node`` / ``.ele`` ASCII content.

    Index base is detected from the smallest point id. Attribute and marker
    columns are ignored.
    """
    node_lines = list(_data_lines(node_text))
    if not node_lines:
        raise MeshError("empty node file")
    try:
        npts, dim = int(node_lines[0][0]), int(node_lines[0][1])
    except (IndexError, ValueError) as exc:
        raise MeshError("malformed node header") from exc
    if dim != 3:
        raise MeshError(f"expected dimension 3, got {dim}")
    body = node_lines[1:]
    if len(body) != npts:
        raise MeshError(f"node count mismatch: header says {npts}, found {len(body)}")
    try:
        ids = np.array([int(r[0]) for r in body])
        coords = np.array([[float(v) for v in r[1:4]] for r in body])
    except (IndexError, ValueError) as exc:
        raise MeshError("malformed node line") from exc
    base = int(ids.min()) if npts else 0
    if base not in (0, 1):
        raise MeshError("node ids must start at 0 or 1")
    vertices = np.empty((npts, 3))
    pos = ids - base
    if np.any(pos < 0) or np.any(pos >= npts) or len(np.unique(pos)) != npts:
        raise MeshError("node ids are not a permutation of 0..n-1")
    vertices[pos] = coords

    ele_lines = list(_data_lines(ele_text))
    if not ele_lines:
        raise MeshError("no elements")
    try:
        ntet, npe = int(ele_lines[0][0]), int(ele_lines[0][1])
    except (IndexError, ValueError) as exc:
        raise MeshError("malformed ele header") from exc
    if ntet == 0:
        raise MeshError("no elements")
    if npe != 4:
        raise MeshError("only linear tetrahedra (4 nodes) are supported")
    body = ele_lines[1:]
    if len(body) != ntet:
        raise MeshError(f"element count mismatch: header says {ntet}, found {len(body)}")
    try:
        tets = np.array([[int(v) for v in r[1:5]] for r in body], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise MeshError("malformed ele line") from exc
    tets = tets - base
    if tets.min() < 0 or tets.max() >= npts:
        raise MeshError("vertex id out of range")
    return Mesh(vertices, tets)


def write_tetgen_mesh(mesh: Mesh, base: int = 1) -> tuple[str, str]:
    """Serialize to tetgen ``.node`` / ``.ele`` text."""
    node = [f"{mesh.n_vertices} 3 0 0"]
    for i, (x, y, z) in enumerate(mesh.vertices):
        node.append(f"{i + base} {x:.17g} {y:.17g} {z:.17g}")
    ele = [f"{mesh.n_tets} 4 0"]
    for i, t in enumerate(mesh.tets):
        ele.append(f"{i + base} " + " ".join(str(v + base) for v in t))
    return "\n".join(node) + "\n", "\n".join(ele) + "\n"
