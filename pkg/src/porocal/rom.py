"""Deflated clustering reduced-order model for porous RVEs.

Elements are agglomerated by k-means on their centroids, each cluster
carries six rigid-body modes (three translations, three rotations about
the cluster centroid), and the incremental equilibrium problem is solved
by Galerkin projection onto that deflation space.  The constitutive law
is evaluated once per cluster on the cluster-volume-averaged strain, so
a simulation costs a dense 6k x 6k factorization per Newton iteration
instead of a sparse fine-scale one.  Damage post-processing and response
extraction mirror the reference solver, taken over cluster-wise fields.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.sparse import coo_matrix

from . import material, voigt
from .errors import ConfigError, ConstitutiveError, SolverError
from .hexfem import AssemblyPlan, HexGrid, hex_b_matrices
from .rve_solver import MacroState, extract_responses, macro_damage


@dataclass
class Clustering:
    """Element agglomeration: assignment to k clusters of centroids."""

    k: int
    assignment: np.ndarray   # (n_elems,) int cluster ids
    centroids: np.ndarray    # (k, 3)
    objective: float         # within-cluster sum of squared distances

    def validate(self):
        counts = np.bincount(self.assignment, minlength=self.k)
        if self.assignment.min() < 0 or self.assignment.max() >= self.k:
            raise ConfigError("cluster ids out of range")
        if np.any(counts == 0):
            raise ConfigError("clustering has empty clusters")


def _sq_dists(points, centers):
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _cluster_means(points, assign, k):
    counts = np.bincount(assign, minlength=k).astype(float)
    means = np.empty((k, points.shape[1]))
    for j in range(points.shape[1]):
        means[:, j] = np.bincount(assign, weights=points[:, j], minlength=k)
    return means / counts[:, None]


def kmeans(points, k, seed=0, max_iter=300):
    """Lloyd k-means over 3-D (or d-D) points.

    Initial centers are a seeded random draw of k distinct points;
    the objective is non-increasing per iteration and iteration stops on
    an assignment fixpoint or after max_iter rounds.  Empty clusters are
    repaired by re-seeding from the point farthest from its center.

    Parameters
    ----------
    points : (n, d) array
    k : int, 1 <= k <= n
    seed : int

    Returns
    -------
    Clustering
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ConfigError("kmeans expects an (n, d) point array")
    n = len(points)
    if k < 1:
        raise ConfigError("cluster count must be >= 1")
    if k > n:
        raise ConfigError(f"cluster count {k} exceeds point count {n}")
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    assign = None
    for _ in range(max_iter):
        d2 = _sq_dists(points, centers)
        new_assign = d2.argmin(axis=1)
        present = np.zeros(k, dtype=bool)
        present[new_assign] = True
        if not present.all():
            # re-seed each empty cluster from the worst-fit point
            worst = np.argsort(-d2[np.arange(n), new_assign])
            used = 0
            for lbl in np.nonzero(~present)[0]:
                far = worst[used]
                used += 1
                centers[lbl] = points[far]
                new_assign[far] = lbl
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        centers = _cluster_means(points, assign, k)
    objective = float(((points - centers[assign]) ** 2).sum())
    clus = Clustering(k=k, assignment=assign, centroids=centers,
                      objective=objective)
    clus.validate()
    return clus


def cluster_elements(mesh, k, seed=0):
    """k-means clustering of the active element centroids of a mesh."""
    grid = HexGrid(mesh)
    return kmeans(grid.element_centroids(), k, seed=seed)


def save_clustering(clustering, path):
    """Write the assignment CSV: element_id,cluster_id."""
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("element_id,cluster_id\n")
        for e, l in enumerate(clustering.assignment):
            f.write(f"{e},{int(l)}\n")


def load_clustering(path, points=None):
    """Read an assignment CSV.

    With ``points`` (the element centroids) the full Clustering is
    rebuilt (centroids as cluster means, objective recomputed);
    otherwise the raw assignment array is returned.
    """
    assign = []
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip()
        if header != "element_id,cluster_id":
            raise ConfigError(f"unexpected clustering CSV header: {header}")
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            eid, cid = line.split(",")
            if int(eid) != i:
                raise ConfigError("clustering CSV rows out of order")
            assign.append(int(cid))
    assign = np.array(assign, dtype=int)
    if points is None:
        return assign
    return clustering_from_assignment(points, assign)


def clustering_from_assignment(points, assign):
    """Clustering with centroids/objective recomputed from an assignment."""
    points = np.asarray(points, dtype=float)
    assign = np.asarray(assign, dtype=int)
    if len(points) != len(assign):
        raise ConfigError("assignment length does not match point count")
    k = int(assign.max()) + 1
    clus = Clustering(k=k, assignment=assign,
                      centroids=_cluster_means(points, assign, k),
                      objective=0.0)
    clus.validate()
    clus.objective = float(
        ((points - clus.centroids[assign]) ** 2).sum())
    return clus


@dataclass
class DeflationBasis:
    """Per-cluster rigid-body prolongation over the free DOFs.

    ``w`` maps the 6k reduced coordinates (t, omega) per cluster to free
    nodal displacements u_i = t + omega x (x_i - c_j); each free node
    belongs to exactly one cluster.
    """

    w: "np.ndarray"            # csr matrix, (n_free, 6k)
    node_cluster: np.ndarray   # (n_free_nodes,) cluster id per free node


def _node_clusters(grid, clustering):
    """Cluster id per free node: nearest owning-element cluster centroid,
    ties broken toward the lower cluster id."""
    conn = grid.edofs[:, ::3] // 3                     # (ne, 8) node ids
    nodes = conn.ravel()
    clus = np.repeat(clustering.assignment, 8)
    dist = np.linalg.norm(
        grid.node_coords[nodes] - clustering.centroids[clus], axis=1)
    order = np.lexsort((clus, dist, nodes))
    nodes_s = nodes[order]
    first = np.ones(len(nodes_s), dtype=bool)
    first[1:] = nodes_s[1:] != nodes_s[:-1]
    owner = np.full(grid.n_nodes, -1, dtype=int)
    owner[nodes_s[first]] = clus[order][first]
    nc = owner[grid.free_nodes]
    if np.any(nc < 0):
        raise SolverError("free node without an owning cluster")
    return nc


def build_deflation(mesh, clustering, prescribed_dofs=None):
    """Rigid-body deflation basis over the free DOFs of a voxel mesh.

    Each free node contributes the 3x6 block [I3 | -skew(x - c)] of its
    cluster, i.e. rows [1,0,0, 0, z,-y], [0,1,0, -z,0, x],
    [0,0,1, y,-x, 0] in relative coordinates.  Prescribed DOFs are
    excluded (they are handled at the fine scale by the lift).

    Raises
    ------
    SolverError
        If any cluster's free-node set is too small or collinear to
        support six independent rigid modes (names the cluster).
    """
    grid = HexGrid(mesh)
    if prescribed_dofs is not None:
        given = np.sort(np.asarray(prescribed_dofs))
        if not np.array_equal(given, np.sort(grid.pres_dofs)):
            raise ConfigError(
                "deflation basis requires the boundary-node prescription")
    clustering.validate()
    nc = _node_clusters(grid, clustering)
    rel = grid.node_coords[grid.free_nodes] - clustering.centroids[nc]
    nf = len(grid.free_nodes)
    k = clustering.k

    # cluster geometry check: >= 3 non-collinear free nodes per cluster
    h2 = grid.h ** 2
    for lbl in range(k):
        pts = rel[nc == lbl]
        if len(pts) < 3:
            raise SolverError(
                f"deflation basis rank-deficient: cluster {lbl} has "
                f"{len(pts)} free nodes")
        mom = np.linalg.eigvalsh(np.cov(pts.T))
        if mom[1] <= 1e-9 * max(mom[-1], h2):
            raise SolverError(
                f"deflation basis rank-deficient: cluster {lbl} free "
                f"nodes are collinear")

    x, y, z = rel[:, 0], rel[:, 1], rel[:, 2]
    zero = np.zeros(nf)
    one = np.ones(nf)
    blocks = np.stack([
        np.stack([one, zero, zero, zero, z, -y], axis=1),
        np.stack([zero, one, zero, -z, zero, x], axis=1),
        np.stack([zero, zero, one, y, -x, zero], axis=1),
    ], axis=1)                                          # (nf, 3, 6)
    rows = (3 * np.arange(nf)[:, None, None]
            + np.arange(3)[None, :, None])
    cols = (6 * nc[:, None, None] + np.arange(6)[None, None, :])
    rows = np.broadcast_to(rows, blocks.shape).ravel()
    cols = np.broadcast_to(cols, blocks.shape).ravel()
    w = coo_matrix((blocks.ravel(), (rows, cols)),
                   shape=(3 * nf, 6 * k)).tocsr()
    return DeflationBasis(w=w, node_cluster=nc)


def rpim_centroid_displacement(coords, disps, centroid, shape=1.0):
    """Radial point interpolation of nodal values at a cluster centroid.

    Gaussian radial basis augmented with the linear polynomial basis
    {1, x, y, z}; the augmented symmetric system enforces the
    interpolation conditions plus the polynomial orthogonality
    constraints.  The radial support is ``shape`` times the bounding-box
    diagonal of the node cloud.

    Parameters
    ----------
    coords : (n, 3) node coordinates
    disps : (n,) or (n, m) nodal values
    centroid : (3,) query point
    shape : float > 0

    Returns
    -------
    (m,) interpolated value (scalar input -> shape ())

    Raises
    ------
    SolverError
        If the node cloud cannot interpolate the data (degenerate
        geometry making the augmented system inconsistent).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    disps = np.asarray(disps, dtype=float)
    scalar = disps.ndim == 1
    vals = disps[:, None] if scalar else disps
    if shape <= 0:
        raise ConfigError("rpim shape parameter must be positive")
    n = len(coords)
    if len(vals) != n:
        raise ConfigError("node and value counts differ")
    diag = np.linalg.norm(coords.max(axis=0) - coords.min(axis=0))
    c0 = shape * (diag if diag > 0 else 1.0)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    r_mat = np.exp(-d2 / c0 ** 2)
    p_mat = np.concatenate([np.ones((n, 1)), coords], axis=1)
    a_sys = np.zeros((n + 4, n + 4))
    a_sys[:n, :n] = r_mat
    a_sys[:n, n:] = p_mat
    a_sys[n:, :n] = p_mat.T
    rhs = np.concatenate([vals, np.zeros((4, vals.shape[1]))], axis=0)
    sol = np.linalg.lstsq(a_sys, rhs, rcond=None)[0]
    a_coef, b_coef = sol[:n], sol[n:]
    fit = r_mat @ a_coef + p_mat @ b_coef
    scale = max(float(np.abs(vals).max()), 1.0)
    if float(np.abs(fit - vals).max()) > 1e-8 * scale:
        raise SolverError(
            "radial point interpolation failed: degenerate node cloud")
    q = np.asarray(centroid, dtype=float)
    phi = np.exp(-((coords - q) ** 2).sum(axis=1) / c0 ** 2)
    pq = np.concatenate([[1.0], q])
    out = phi @ a_coef + pq @ b_coef
    return out[0] if scalar else out


@dataclass
class RomResult:
    """Per-step reduced solution and cluster-wise fields."""

    grid: HexGrid
    clustering: Clustering
    basis: DeflationBasis
    load: object
    ts: np.ndarray                 # (n_steps,)
    lam_hist: np.ndarray           # (n_steps, 6k) reduced coordinates
    sig_hist: np.ndarray           # (n_steps, k, 6) undamaged cluster stress
    eqpl_hist: np.ndarray          # (n_steps, k)
    cluster_volumes: np.ndarray    # (k,)
    lift_unit: np.ndarray          # (3 n_nodes,) unit-time affine lift
    newton_log: list

    @property
    def n_steps(self):
        return len(self.ts)

    def displacement(self, step):
        """Fine-scale displacement vector recovered from the reduced
        coordinates: affine lift everywhere plus W lambda on free DOFs."""
        u = self.ts[step] * self.lift_unit
        u[self.grid.free_dofs] += self.basis.w @ self.lam_hist[step]
        return u


def solve_rom_reference(mesh, clustering, props, load, rel_tol=1e-8,
                        abs_tol=1e-12, max_newton=25, max_halvings=5):
    """Incremental Newton solve of the reduced (deflated) RVE problem.

    The reduced residual is W'(f_ext - f_int(W lambda + lift)).  The
    constitutive law runs once per cluster on the cluster-volume-averaged
    strain and its state (plastic strain, hardening) is shared by all the
    cluster's elements; the internal force recovers stress pointwise from
    the elastic law with that shared plastic state, which keeps the
    reduced system well posed (a fully shared stress field has a singular
    reduced Jacobian).  The reduced tangent is W' K W with K the exact
    fine-scale derivative of that internal force: the elastic stiffness
    minus one rank-six correction per plastic cluster coupling every
    element to the shared return map.  Newton is therefore quadratic; the
    correction only softens cluster averages, so the tangent stays
    positive definite and is factored densely.  Convergence and substep
    halving follow the reference solver.

    Returns
    -------
    RomResult

    Raises
    ------
    SolverError
        On divergence after the allowed halvings.
    """
    grid = HexGrid(mesh)
    basis = build_deflation(mesh, clustering)
    w_mat = basis.w
    b_mats, w_ip = hex_b_matrices(grid.h)
    plan = AssemblyPlan(grid)
    assign = clustering.assignment
    k = clustering.k
    ne = grid.n_elems

    counts = np.bincount(assign, minlength=k).astype(float)
    vol = counts * 8.0 * w_ip                  # cluster volumes
    c_el = material.elastic_tangent(props)
    ke_el = w_ip * np.einsum("gia,ij,gjb->ab", b_mats, c_el, b_mats)

    eps_pl = np.zeros((k, 6))
    eq_pl = np.zeros(k)
    lam = np.zeros(6 * k)

    # affine lift of the boundary data over every node; clusters add
    # rigid corrections on top of the affine flow
    lift_unit = (grid.node_coords
                 @ (load.f_target - np.eye(3)).T).ravel()

    n_steps = load.n_steps
    ts = np.zeros(n_steps)
    lam_hist = np.zeros((n_steps, 6 * k))
    sig_hist = np.zeros((n_steps, k, 6))
    eqpl_hist = np.zeros((n_steps, k))
    newton_log = []

    u_full = np.zeros(3 * grid.n_nodes)

    # d(V_l E_l)/dlambda is constant: one (6, 6k) block per cluster built
    # from the volume-integrated strain-displacement rows and the basis
    b_sum = w_ip * b_mats.sum(axis=0)          # (6, 24)
    shp = (ne, 6, 24)
    s_rows = (6 * assign[:, None, None]
              + np.arange(6)[None, :, None]) * np.ones((1, 1, 24), dtype=int)
    s_cols = np.broadcast_to(grid.edofs[:, None, :], shp)
    s_data = np.broadcast_to(b_sum[None], shp)
    s_mat = coo_matrix((s_data.ravel(),
                        (s_rows.ravel(), s_cols.ravel())),
                       shape=(6 * k, 3 * grid.n_nodes)).tocsr()
    w_coo = w_mat.tocoo()
    w_full = coo_matrix((w_coo.data,
                         (grid.free_dofs[w_coo.row], w_coo.col)),
                        shape=(3 * grid.n_nodes, 6 * k)).tocsr()
    t_mat = np.asarray((s_mat @ w_full).todense()).reshape(k, 6, 6 * k)

    k_red_el = None
    elastic_factor = None

    def elastic_reduced():
        nonlocal k_red_el, elastic_factor
        if k_red_el is None:
            vals = np.broadcast_to(ke_el, (ne, 24, 24))
            k_ff = plan.assemble_ff(np.ascontiguousarray(vals))
            k_red_el = (w_mat.T @ (k_ff @ w_mat)).toarray()
            elastic_factor = cho_factor(k_red_el)
        return k_red_el, elastic_factor

    def point_and_cluster_strains(lam_now, t_now):
        u_full[:] = t_now * lift_unit
        u_full[grid.free_dofs] += w_mat @ lam_now
        strains = np.einsum("gia,ea->egi", b_mats,
                            grid.gather_element_dofs(u_full))
        e_sum = strains.sum(axis=1)            # (ne, 6)
        e_cl = np.empty((k, 6))
        for j in range(6):
            e_cl[:, j] = np.bincount(assign, weights=e_sum[:, j],
                                     minlength=k)
        return strains, w_ip * e_cl / vol[:, None]

    def reduced_tangent(out):
        k_el, factor = elastic_reduced()
        idx = np.nonzero(out["plastic"])[0]
        if idx.size == 0:
            return factor
        f1, f2, nhat = out["f1"], out["f2"], out["nhat"]
        # dsig/dE_l = C - f1 P + f2 nn'; the shared plastic strain couples
        # each cluster's elements through the average-strain rows T_l
        m6 = (f1[idx, None, None] * voigt.PV
              - f2[idx, None, None] * nhat[idx, :, None] * nhat[idx, None, :])
        m6 /= vol[idx, None, None]
        tl = t_mat[idx]
        corr = np.tensordot(tl, np.matmul(m6, tl), axes=([0, 1], [0, 1]))
        return cho_factor(k_el - corr)

    def substep(t_trial, lam_in, eps_pl_in, eq_pl_in):
        lam_work = lam_in.copy()
        res_hist = []
        for _ in range(max_newton):
            strains, e_cl = point_and_cluster_strains(lam_work, t_trial)
            out = material.return_map_batch(eps_pl_in, eq_pl_in, e_cl, props)
            # pointwise elastic stress with the shared cluster plastic state
            eps_el = strains - out["eps_pl"][assign][:, None, :]
            sig = eps_el @ c_el.T
            f_el = w_ip * np.einsum("gia,egi->ea", b_mats, sig)
            r_f = grid.scatter_add(f_el)[grid.free_dofs]
            r_red = -(w_mat.T @ r_f)
            rnorm = float(np.linalg.norm(r_red))
            res_hist.append(rnorm)
            if not np.isfinite(rnorm):
                return None, res_hist
            if rnorm <= max(rel_tol * res_hist[0], abs_tol):
                return (lam_work, out), res_hist
            try:
                factor = reduced_tangent(out)
            except LinAlgError:
                return None, res_hist
            lam_work = lam_work + cho_solve(factor, r_red)
        return None, res_hist

    t = 0.0
    for step in range(n_steps):
        t_next = (step + 1) / n_steps
        dt = t_next - t
        halvings = 0
        last_hist = []
        while t < t_next - 1e-14:
            result, res_hist = substep(t + dt, lam, eps_pl, eq_pl)
            last_hist = res_hist
            if result is None:
                halvings += 1
                if halvings > max_halvings:
                    raise SolverError(
                        f"reduced Newton diverged at step {step + 1} after "
                        f"{max_halvings} halvings",
                        step=step + 1, residual_history=res_hist)
                dt *= 0.5
                continue
            lam, out = result
            eps_pl = out["eps_pl"]
            eq_pl = out["eq_pl"]
            t = min(t + dt, t_next)
            dt = min(dt, t_next - t) if t < t_next else dt
        ts[step] = t_next
        lam_hist[step] = lam
        sig_hist[step] = out["stress"]
        eqpl_hist[step] = eq_pl
        newton_log.append(last_hist)

    return RomResult(grid=grid, clustering=clustering, basis=basis,
                     load=load, ts=ts, lam_hist=lam_hist, sig_hist=sig_hist,
                     eqpl_hist=eqpl_hist, cluster_volumes=vol,
                     lift_unit=lift_unit, newton_log=newton_log)


def rom_damage_post(result, params):
    """Cluster-wise stabilized damage post-processing.

    Same construction as the reference solver: per cluster,
    D = damage(eq_pl) and the damaged stress is (1 - D) times the
    undamaged stress; volume averages weight clusters by their volume
    over the full cell (pores carry zero stress).

    Returns
    -------
    list of MacroState
    """
    vw = result.cluster_volumes / result.grid.side_length ** 3
    f_dev = result.load.f_target - np.eye(3)
    loaded = bool(np.any(np.abs(f_dev) > 0))
    states = []
    for step in range(result.n_steps):
        d_field = material.damage_value(result.eqpl_hist[step], params)
        sig = result.sig_hist[step]
        s1 = (vw[:, None] * sig).sum(axis=0)
        sd = (vw[:, None] * (1.0 - d_field)[:, None] * sig).sum(axis=0)
        e_m = result.load.strain_voigt(result.ts[step])
        if voigt.double_contract(s1, s1) == 0.0:
            if loaded and result.ts[step] > 0:
                raise ConstitutiveError(
                    "homogenized undamaged stress is zero under load")
            d_macro = 0.0
        else:
            d_macro = macro_damage(sd, s1)
        states.append(MacroState(s1=s1, sd=sd, e_m=e_m,
                                 d_macro=float(d_macro)))
    return states


def solve_rom_damage(mesh, clustering, props, damage_params, load,
                     **solver_kwargs):
    """Reduced-order pipeline: deflated solve, damage post, responses."""
    result = solve_rom_reference(mesh, clustering, props, load,
                                 **solver_kwargs)
    states = rom_damage_post(result, damage_params)
    return extract_responses(load, result.ts, states)
