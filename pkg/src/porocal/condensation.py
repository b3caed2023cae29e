"""Static condensation of the RVE stiffness to the boundary and the
homogenized elastic tangent / effective Lame constants extracted from it.

The reduced stiffness K_r = K_pp - K_pf K_ff^{-1} K_fp maps prescribed
boundary displacements directly to reaction forces.  Contracting it with
the boundary coordinates (relative to the centroid) gives the effective
elastic tangent; a least-squares projection onto the isotropic family
gives (mu, lambda) and the anisotropy residual.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import issparse
from scipy.sparse.linalg import splu

from . import material, voigt
from .errors import SolverError
from .hexfem import AssemblyPlan, HexGrid, hex_b_matrices

# Voigt pair -> tensor index map for the 6x6 reduction
_VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


@dataclass
class EffectiveTangent:
    """Homogenized elastic tangent and its isotropic reduction."""

    c_el: np.ndarray       # 6x6 Voigt (MPa), acts on engineering strain
    mu: float
    lam: float
    iso_residual: float


def schur_reduce(k, prescribed):
    """Condense a symmetric stiffness onto the prescribed DOFs.

    Parameters
    ----------
    k : (n, n) sparse or dense symmetric matrix
    prescribed : index array of prescribed DOFs

    Returns
    -------
    K_r : (p, p) dense array, K_pp - K_pf K_ff^{-1} K_fp

    Raises
    ------
    SolverError
        If the free-free block is singular (mechanism / rigid mode).
    """
    n = k.shape[0]
    prescribed = np.asarray(prescribed)
    mask = np.zeros(n, dtype=bool)
    mask[prescribed] = True
    free = np.nonzero(~mask)[0]
    if issparse(k):
        k = k.tocsr()
        k_pp = k[prescribed][:, prescribed].toarray()
        if len(free) == 0:
            return k_pp
        k_fp = k[free][:, prescribed].toarray()
        k_ff = k[free][:, free].tocsc()
        try:
            lu = splu(k_ff)
        except RuntimeError as exc:
            raise SolverError(f"free-free block is singular: {exc}")
        x = lu.solve(k_fp)
    else:
        k = np.asarray(k, dtype=float)
        k_pp = k[np.ix_(prescribed, prescribed)]
        if len(free) == 0:
            return k_pp
        k_fp = k[np.ix_(free, prescribed)]
        k_ff = k[np.ix_(free, free)]
        try:
            x = np.linalg.solve(k_ff, k_fp)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"free-free block is singular: {exc}")
    k_r = k_pp - k_fp.T @ x
    return 0.5 * (k_r + k_r.T)


def elastic_stiffness_blocks(mesh, props):
    """Assembled elastic stiffness blocks of a voxel mesh.

    Returns (grid, K_ff, K_fp, K_pp) with the blocks over the grid's
    free/prescribed DOF partition.
    """
    grid = HexGrid(mesh)
    b_mats, w = hex_b_matrices(grid.h)
    c = material.elastic_tangent(props)
    ke = w * np.einsum("gia,ij,gjb->ab", b_mats, c, b_mats)
    plan = AssemblyPlan(grid)
    blocks = plan.assemble_blocks(
        np.broadcast_to(ke, (grid.n_elems, 24, 24)))
    return (grid,) + blocks


def condense_rve(mesh, props):
    """(grid, K_r) for the elastic RVE, condensed onto all boundary DOFs.

    The Schur complement is formed with 3 right-hand-side columns per
    boundary node through the sparse factorization of K_ff.
    """
    grid, k_ff, k_fp, k_pp = elastic_stiffness_blocks(mesh, props)
    try:
        lu = splu(k_ff.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"free-free block is singular: {exc}")
    x = lu.solve(k_fp.toarray())
    k_r = k_pp.toarray() - k_fp.T @ x
    return grid, 0.5 * (k_r + k_r.T)


def _c4_to_voigt(c4):
    """Minor-symmetrize a fourth-order tangent and reduce to 6x6 Voigt
    (acting on engineering strain), with a positive-definiteness check."""
    c4 = 0.25 * (c4 + c4.transpose(1, 0, 2, 3) + c4.transpose(0, 1, 3, 2)
                 + c4.transpose(1, 0, 3, 2))
    c66 = np.empty((6, 6))
    for p, (i, j) in enumerate(_VOIGT_PAIRS):
        for q, (k, l) in enumerate(_VOIGT_PAIRS):
            c66[p, q] = c4[i, j, k, l]
    c66 = 0.5 * (c66 + c66.T)
    # eigenvalues in the tensor metric (weights on the shear rows/cols)
    eigs = np.linalg.eigvalsh(c66 * np.outer(
        np.sqrt(voigt.FROB_W), np.sqrt(voigt.FROB_W)))
    if eigs[0] <= 0.0:
        raise SolverError(
            f"homogenized tangent is not positive definite; eigenvalues "
            f"{eigs.tolist()}")
    return c66


def homogenized_tangent(mesh, k_r, boundary_coords):
    """Effective elastic tangent from the condensed boundary stiffness.

    C[i,j,k,l] = (1/V) sum_{a,b} K_r[(a,i),(b,k)] X_a[j] X_b[l] with X
    measured from the RVE centroid; the result is minor-symmetrized and
    reduced to the 6x6 Voigt matrix acting on engineering strain.

    Parameters
    ----------
    mesh : VoxelMesh
    k_r : (3nb, 3nb) condensed stiffness over the boundary nodes
    boundary_coords : (nb, 3) boundary node coordinates

    Returns
    -------
    (6, 6) array

    Raises
    ------
    SolverError
        If the resulting Voigt matrix is not positive definite (reports
        the eigenvalues).
    """
    coords = np.asarray(boundary_coords, dtype=float)
    nb = len(coords)
    if k_r.shape != (3 * nb, 3 * nb):
        raise SolverError("condensed stiffness does not match node count")
    x_rel = coords - coords.mean(axis=0)
    vol = mesh.side_length ** 3
    kr4 = k_r.reshape(nb, 3, nb, 3)
    c4 = np.einsum("aibk,aj,bl->ijkl", kr4, x_rel, x_rel) / vol
    return _c4_to_voigt(c4)


def lame_from_tangent(c_el):
    """Least-squares isotropic reduction of a Voigt elastic tangent.

    Projects onto span{lambda * J, mu * 2 I_sym} in the Frobenius metric of
    the underlying fourth-order tensors and reports the relative residual.

    Returns
    -------
    (mu, lambda, iso_residual)
    """
    c = 0.5 * (np.asarray(c_el, dtype=float)
               + np.asarray(c_el, dtype=float).T)
    # tensor Frobenius metric: weight w_p w_q on Voigt entry (p, q)
    wv = voigt.FROB_W
    ww = np.outer(wv, wv)
    a1 = voigt.JJ                                 # d_ij d_kl
    a2 = np.diag([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])  # 2 I_sym acting on eng strain
    g11 = np.sum(ww * a1 * a1)
    g12 = np.sum(ww * a1 * a2)
    g22 = np.sum(ww * a2 * a2)
    b1 = np.sum(ww * a1 * c)
    b2 = np.sum(ww * a2 * c)
    lam, mu = np.linalg.solve(np.array([[g11, g12], [g12, g22]]),
                              np.array([b1, b2]))
    fit = lam * a1 + mu * a2
    num = np.sqrt(np.sum(ww * (c - fit) ** 2))
    den = np.sqrt(np.sum(ww * c ** 2))
    residual = float(num / den) if den > 0 else 0.0
    return float(mu), float(lam), residual


def effective_tangent(mesh, props):
    """Homogenized tangent and Lame fit for one RVE.

    Contracts the condensed stiffness against the boundary coordinates
    using 9 right-hand sides instead of forming the full Schur
    complement, so it stays cheap at production resolutions. Equals
    homogenized_tangent(condense_rve(...)) up to round-off.
    """
    grid, k_ff, k_fp, k_pp = elastic_stiffness_blocks(mesh, props)
    coords = grid.node_coords[grid.prescribed_nodes]
    x_rel = coords - coords.mean(axis=0)
    g = np.zeros((3 * len(coords), 9))
    for i in range(3):
        for j in range(3):
            g[i::3, 3 * i + j] = x_rel[:, j]
    try:
        lu = splu(k_ff.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"free-free block is singular: {exc}")
    y = k_fp @ g
    m9 = g.T @ (k_pp @ g) - y.T @ lu.solve(y)
    c4 = m9.reshape(3, 3, 3, 3) / mesh.side_length ** 3
    c_el = _c4_to_voigt(c4)
    mu, lam, resid = lame_from_tangent(c_el)
    return EffectiveTangent(c_el=c_el, mu=mu, lam=lam, iso_residual=resid)


def save_tangent_rows(rows, path):
    """Write the training table CSV: vf,np,ar,rd,mu,lambda,iso_residual.

    rows: iterable of (RveDescriptors, EffectiveTangent).
    """
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("vf,np,ar,rd,mu,lambda,iso_residual\n")
        for desc, tan in rows:
            f.write(f"{float(desc.vf)!r},{int(desc.np)},{float(desc.ar)!r},"
                    f"{float(desc.rd)!r},{float(tan.mu)!r},"
                    f"{float(tan.lam)!r},{float(tan.iso_residual)!r}\n")


def load_tangent_rows(path):
    """Read a tangent table CSV -> list of dict rows."""
    from .errors import ConfigError
    out = []
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip()
        if header != "vf,np,ar,rd,mu,lambda,iso_residual":
            raise ConfigError(f"unexpected tangent CSV header: {header}")
        for line in f:
            if not line.strip():
                continue
            vf, np_, ar, rd, mu, lam, resid = line.strip().split(",")
            out.append(dict(vf=float(vf), np=int(np_), ar=float(ar),
                            rd=float(rd), mu=float(mu), lam=float(lam),
                            iso_residual=float(resid)))
    return out
