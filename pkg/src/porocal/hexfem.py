"""Voxel-hexahedral FEM core: structured-grid topology, trilinear hex
shape-function matrices, sparse assembly plans, and a reusable direct
solver for the free-free stiffness block.

Everything here works on a VoxelMesh whose matrix voxels become 8-node
hexahedra (pore voxels carry no element).  DOF numbering is node-major
(dof = 3*node + component); node ids are (ix*(res+1) + iy)*(res+1) + iz.
Local element nodes follow the x-fastest corner order (0,0,0), (1,0,0),
(0,1,0), (1,1,0), (0,0,1), ...
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import splu

from . import voigt
from .errors import SolverError

# local corner offsets, x fastest
_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
                     [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]])
# corner signs in the parent element [-1,1]^3
_XI_A = 2.0 * _CORNERS - 1.0


def hex_b_matrices(h):
    """Strain-displacement matrices for a cube hex of side h.

    Returns
    -------
    b : (8, 6, 24) array
        One 6x24 matrix per Gauss point of the 2x2x2 rule, mapping the 24
        nodal displacements to the engineering-Voigt strain.
    w : float
        Integration weight per point, (h/2)^3.
    """
    g = 1.0 / np.sqrt(3.0)
    pts = _XI_A * g  # Gauss points share the corner layout
    b = np.zeros((8, 6, 24))
    for gp in range(8):
        xi, eta, zeta = pts[gp]
        # dN/dxi -> dN/dx with the 2/h jacobian of x = (xi+1) h/2
        dn = np.empty((8, 3))
        for a in range(8):
            sa = _XI_A[a]
            dn[a, 0] = 0.125 * sa[0] * (1 + eta * sa[1]) * (1 + zeta * sa[2])
            dn[a, 1] = 0.125 * sa[1] * (1 + xi * sa[0]) * (1 + zeta * sa[2])
            dn[a, 2] = 0.125 * sa[2] * (1 + xi * sa[0]) * (1 + eta * sa[1])
        dn *= 2.0 / h
        for a in range(8):
            dx, dy, dz = dn[a]
            b[gp, 0, 3 * a + 0] = dx
            b[gp, 1, 3 * a + 1] = dy
            b[gp, 2, 3 * a + 2] = dz
            b[gp, 3, 3 * a + 0] = dy
            b[gp, 3, 3 * a + 1] = dx
            b[gp, 4, 3 * a + 0] = dz
            b[gp, 4, 3 * a + 2] = dx
            b[gp, 5, 3 * a + 1] = dz
            b[gp, 5, 3 * a + 2] = dy
    return b, (h / 2.0) ** 3


class HexGrid:
    """Topology and DOF bookkeeping for the matrix phase of a VoxelMesh."""

    def __init__(self, mesh):
        res = mesh.resolution
        self.resolution = res
        self.side_length = mesh.side_length
        self.h = mesh.side_length / res
        n1 = res + 1
        self.n_nodes = n1 ** 3

        ex, ey, ez = np.nonzero(mesh.indicator == 0)
        if len(ex) == 0:
            raise SolverError("mesh has no matrix voxels")
        self.elem_coords = np.stack([ex, ey, ez], axis=1)
        self.n_elems = len(ex)

        # connectivity: global node ids of the 8 corners per element
        corner = _CORNERS[None, :, :] + self.elem_coords[:, None, :]
        nid = (corner[..., 0] * n1 + corner[..., 1]) * n1 + corner[..., 2]
        self.enodes = nid.astype(np.int64)
        self.edofs = (3 * self.enodes[:, :, None]
                      + np.arange(3)[None, None, :]).reshape(-1, 24)

        active = np.zeros(self.n_nodes, dtype=bool)
        active[self.enodes.ravel()] = True
        ii, jj, kk = np.unravel_index(np.arange(self.n_nodes), (n1,) * 3)
        on_boundary = ((ii == 0) | (ii == res) | (jj == 0) | (jj == res)
                       | (kk == 0) | (kk == res))
        self.prescribed_nodes = np.nonzero(active & on_boundary)[0]
        self.free_nodes = np.nonzero(active & ~on_boundary)[0]
        self.node_coords = np.stack([ii, jj, kk], axis=1) * self.h

        self.free_dofs = (3 * self.free_nodes[:, None]
                          + np.arange(3)).reshape(-1)
        self.pres_dofs = (3 * self.prescribed_nodes[:, None]
                          + np.arange(3)).reshape(-1)
        self.n_free = len(self.free_dofs)
        self.n_pres = len(self.pres_dofs)

        # global dof -> position in the free/prescribed vectors (-1 if absent)
        self.dof_kind = np.zeros(3 * self.n_nodes, dtype=np.int8)  # 0 inactive
        self.dof_kind[self.free_dofs] = 1
        self.dof_kind[self.pres_dofs] = 2
        self.dof_pos = np.full(3 * self.n_nodes, -1, dtype=np.int64)
        self.dof_pos[self.free_dofs] = np.arange(self.n_free)
        self.dof_pos[self.pres_dofs] = np.arange(self.n_pres)

    def element_centroids(self):
        return (self.elem_coords + 0.5) * self.h

    def gather_element_dofs(self, u_full):
        """(ndof,) global vector -> (ne, 24) per-element values."""
        return u_full[self.edofs]

    def scatter_add(self, values):
        """(ne, 24) per-element values -> (ndof,) global sum (deterministic)."""
        return np.bincount(self.edofs.ravel(), weights=values.ravel(),
                           minlength=3 * self.n_nodes)


class _BlockPlan:
    """Precomputed scatter of element-matrix entries into one CSR block."""

    def __init__(self, rows, cols, mask, n_rows, n_cols):
        key = rows.astype(np.int64) * n_cols + cols.astype(np.int64)
        uniq, inv = np.unique(key, return_inverse=True)
        self.mask = mask
        self.slots = inv.astype(np.int64)
        self.nnz = len(uniq)
        counts = np.bincount((uniq // n_cols).astype(np.int64),
                             minlength=n_rows)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.indices = (uniq % n_cols).astype(np.int32)
        self.shape = (n_rows, n_cols)

    def assemble(self, flat_values):
        data = np.bincount(self.slots, weights=flat_values[self.mask],
                           minlength=self.nnz)
        return csr_matrix((data, self.indices, self.indptr), shape=self.shape)


class AssemblyPlan:
    """Scatter plans for the stiffness blocks over (free, prescribed) DOFs.

    The free-free block is always built; the coupling and
    prescribed-prescribed blocks are built on first use (only the
    condensation path needs them).
    """

    def __init__(self, grid: HexGrid):
        self.grid = grid
        row_dofs = np.repeat(grid.edofs, 24, axis=1).ravel()
        col_dofs = np.tile(grid.edofs, (1, 24)).ravel()
        self._rk = grid.dof_kind[row_dofs]
        self._ck = grid.dof_kind[col_dofs]
        self._rp = grid.dof_pos[row_dofs]
        self._cp = grid.dof_pos[col_dofs]
        self._ff = self._plan(1, 1, grid.n_free, grid.n_free)
        self._fp = None
        self._pp = None

    def _plan(self, rkind, ckind, nr, nc):
        mask = (self._rk == rkind) & (self._ck == ckind)
        return _BlockPlan(self._rp[mask], self._cp[mask], mask, nr, nc)

    def assemble_ff(self, element_matrices):
        return self._ff.assemble(element_matrices.ravel())

    def assemble_blocks(self, element_matrices):
        """(K_ff, K_fp, K_pp) for condensation."""
        g = self.grid
        if self._fp is None:
            self._fp = self._plan(1, 2, g.n_free, g.n_pres)
            self._pp = self._plan(2, 2, g.n_pres, g.n_pres)
        flat = element_matrices.ravel()
        return (self._ff.assemble(flat), self._fp.assemble(flat),
                self._pp.assemble(flat))


def nested_dissection_order(grid: HexGrid):
    """Fill-reducing permutation of the free DOFs: recursive geometric
    bisection of the interior node lattice, separator planes ordered last
    (and recursively within themselves)."""
    res = grid.resolution
    n1 = res + 1
    m = res - 1  # interior nodes per side
    order = []

    def rec(x0, x1, y0, y1, z0, z1):
        dims = (x1 - x0, y1 - y0, z1 - z0)
        if max(dims) <= 3 or min(dims) <= 0:
            for i in range(x0, x1):
                for j in range(y0, y1):
                    for k in range(z0, z1):
                        order.append((i, j, k))
            return
        axis = int(np.argmax(dims))
        lo = (x0, y0, z0)[axis]
        hi = (x1, y1, z1)[axis]
        mid = (lo + hi) // 2
        bounds = [x0, x1, y0, y1, z0, z1]
        left = bounds.copy()
        left[2 * axis + 1] = mid
        right = bounds.copy()
        right[2 * axis] = mid + 1
        sep = bounds.copy()
        sep[2 * axis], sep[2 * axis + 1] = mid, mid + 1
        rec(*left)
        rec(*right)
        rec(*sep)

    rec(0, m, 0, m, 0, m)
    idx = np.array(order)
    # interior lattice coordinate (i,j,k) -> global node id with offset 1
    nids = ((idx[:, 0] + 1) * n1 + (idx[:, 1] + 1)) * n1 + (idx[:, 2] + 1)
    dofs = (3 * nids[:, None] + np.arange(3)).reshape(-1)
    pos = grid.dof_pos[dofs]
    keep = grid.dof_kind[dofs] == 1
    perm = pos[keep]
    if len(perm) != grid.n_free:
        raise SolverError("nested dissection permutation is not a bijection")
    return perm


class ReusableDirectSolver:
    """Sparse direct solver for SPD-ish stiffness blocks.

    Factors a single-precision copy of the (nested-dissection permuted)
    matrix and recovers double-precision solutions by iterative refinement
    against the exact current matrix.  The factorization is reused across
    nearby systems (Newton iterations, small load increments); when
    refinement stalls the current matrix is refactored and refinement
    restarts, so results never depend on how stale the factor was.  If a
    fresh single-precision factor still stalls (conditioning beyond what
    float32 can refine) the solver promotes itself to double precision
    for the rest of its life.

    Success means relative residual <= tol, or normwise backward error
    <= btol for systems so close to singular that the first target is
    unreachable at working precision (e.g. a matrix island whose
    connecting material has exhausted its hardening table).
    """

    def __init__(self, perm, tol=1e-10, btol=1e-12, max_refine=40):
        self.perm = np.asarray(perm)
        self.tol = tol
        self.btol = btol
        self.max_refine = max_refine
        self._lu = None
        self._dtype = np.float32
        self.n_factor = 0

    def factor(self, k_ff, dtype=None):
        if dtype is not None:
            self._dtype = dtype
        kp = k_ff[self.perm][:, self.perm].tocsc().astype(self._dtype)
        try:
            self._lu = splu(kp, permc_spec="NATURAL",
                            options=dict(SymmetricMode=True,
                                         DiagPivotThresh=0.01))
        except RuntimeError as exc:
            raise SolverError(f"stiffness factorization failed: {exc}")
        self.n_factor += 1

    def _refine(self, k_ff, b, a_norm):
        nb = np.linalg.norm(b)
        x = np.zeros_like(b)
        if nb == 0.0:
            return x, True
        r = b.copy()
        rn_prev = np.inf
        slow = 0
        for _ in range(self.max_refine):
            y = self._lu.solve(r[self.perm].astype(self._dtype))
            dx = np.empty_like(x)
            dx[self.perm] = y.astype(np.float64)
            x += dx
            r = b - k_ff @ x
            if not np.isfinite(r).all():
                return x, False
            rn = np.linalg.norm(r)
            if rn <= self.tol * nb:
                return x, True
            # nearly singular tangents put the true solution far along a
            # soft mode; accept on backward error like a dense solver,
            # but only with a finite bound (norms overflow to inf when a
            # stale factor no longer matches the matrix)
            thresh = self.btol * (a_norm * np.linalg.norm(x) + nb)
            if np.isfinite(thresh) and rn <= thresh:
                return x, True
            # a pass is far cheaper than a refactor, so keep going while
            # the residual contracts; give up once it clearly does not
            slow = slow + 1 if rn > 0.7 * rn_prev else 0
            if slow >= 2 or rn > 1e3 * nb:
                return x, False
            rn_prev = rn
        return x, False

    def solve(self, k_ff, b):
        """Solve k_ff x = b to relative residual tol, or backward error
        btol when the system is too ill conditioned for that to exist."""
        if self._lu is None:
            self.factor(k_ff)
        a_norm = np.abs(k_ff).sum(axis=1).max()
        x, ok = self._refine(k_ff, b, a_norm)
        if not ok:
            self.factor(k_ff)
            x, ok = self._refine(k_ff, b, a_norm)
        if not ok and self._dtype == np.float32:
            self.factor(k_ff, dtype=np.float64)
            x, ok = self._refine(k_ff, b, a_norm)
        if not ok:
            raise SolverError(
                "iterative refinement stalled on a fresh factorization")
        return x
