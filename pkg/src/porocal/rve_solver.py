"""Direct numerical simulation of a porous RVE: incremental Newton solve
of the undamaged elasto-plastic problem under affine boundary
displacements, stabilized damage post-processing, and homogenized
response extraction.

Kinematics are small-strain: the macroscopic load is given as a
deformation gradient F and applied as boundary displacements
u = (F(t) - I) X with F(t) = I + t (F - I), t in (0, 1].  Damage never
enters the equilibrium solve; it maps the converged undamaged stress
field to a damaged one pointwise (the three-reference construction, with
the second reference realized as E_el = C_el^{-1} S per point).
"""

from dataclasses import dataclass, field

import numpy as np

from . import material, voigt
from .errors import ConfigError, ConstitutiveError, SolverError
from .hexfem import (AssemblyPlan, HexGrid, ReusableDirectSolver,
                     hex_b_matrices, nested_dissection_order)


@dataclass(frozen=True)
class MacroLoad:
    """Proportional macroscopic load: F(t) = I + t (f_target - I)."""

    f_target: np.ndarray
    n_steps: int = 50

    def __post_init__(self):
        f = np.asarray(self.f_target, dtype=float)
        if f.shape != (3, 3):
            raise ConfigError("f_target must be a 3x3 deformation gradient")
        if np.linalg.det(f) <= 0.0:
            raise ConfigError("f_target must have positive determinant")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        object.__setattr__(self, "f_target", f)

    def strain_voigt(self, t):
        """Engineering-Voigt macroscopic strain sym(F(t) - I)."""
        e = t * 0.5 * ((self.f_target - np.eye(3))
                       + (self.f_target - np.eye(3)).T)
        return voigt.tensor_to_strain(e)


def uniaxial_stretch(stretch=1.1, lateral=0.95, n_steps=50):
    """The standard test load: axial stretch with lateral contraction."""
    return MacroLoad(np.diag([stretch, lateral, lateral]), n_steps=n_steps)


@dataclass
class BoundaryCondition:
    """Prescribed displacements on the cube boundary nodes."""

    node_ids: np.ndarray
    coords: np.ndarray
    values: np.ndarray  # (n, 3) displacements


def apply_macro_bc(mesh, f):
    """Affine Dirichlet data u = (f - I) X for every cube-boundary node.

    Parameters
    ----------
    mesh : VoxelMesh
    f : (3, 3) array
        Deformation gradient, det(f) > 0.

    Returns
    -------
    BoundaryCondition
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (3, 3) or np.linalg.det(f) <= 0.0:
        raise ConfigError("f must be a 3x3 gradient with positive determinant")
    res = mesh.resolution
    n1 = res + 1
    ii, jj, kk = np.unravel_index(np.arange(n1 ** 3), (n1,) * 3)
    on_boundary = ((ii == 0) | (ii == res) | (jj == 0) | (jj == res)
                   | (kk == 0) | (kk == res))
    ids = np.nonzero(on_boundary)[0]
    h = mesh.side_length / res
    coords = np.stack([ii[ids], jj[ids], kk[ids]], axis=1) * h
    values = coords @ (f - np.eye(3)).T
    return BoundaryCondition(node_ids=ids, coords=coords, values=values)


@dataclass
class SolveResult:
    """Per-step fields from the first-reference (undamaged) solve."""

    grid: HexGrid
    load: MacroLoad
    ts: np.ndarray                # (n_steps,)
    u_hist: np.ndarray            # (n_steps, ndof)
    sig_hist: np.ndarray          # (n_steps, ne, 8, 6) undamaged stress
    eqpl_hist: np.ndarray         # (n_steps, ne, 8)
    newton_log: list              # per step: list of residual norms

    @property
    def n_steps(self):
        return len(self.ts)


def solve_reference_rve(mesh, props, load, rel_tol=1e-8, abs_tol=1e-12,
                        max_newton=25, max_halvings=5):
    """Incremental Newton solve of the undamaged elasto-plastic RVE.

    Parameters
    ----------
    mesh : VoxelMesh
    props : MaterialProps
    load : MacroLoad
    rel_tol, abs_tol : float
        Per-step convergence: ||R|| <= max(rel_tol * ||R_initial||, abs_tol).
    max_newton : int
        Iteration cap per substep.
    max_halvings : int
        Substep halvings allowed per increment before giving up.

    Returns
    -------
    SolveResult

    Raises
    ------
    SolverError
        On divergence after the allowed halvings, carrying the step index
        and the residual history of the failed substep.
    """
    grid = HexGrid(mesh)
    b_mats, w = hex_b_matrices(grid.h)
    plan = AssemblyPlan(grid)
    solver = ReusableDirectSolver(nested_dissection_order(grid))

    c_el = material.elastic_tangent(props)
    ke_el = w * np.einsum("gia,ij,gjb->ab", b_mats, c_el, b_mats)
    kp = w * np.einsum("gia,ij,gjb->gab", b_mats, voigt.PV, b_mats)

    ne = grid.n_elems
    ndof = 3 * grid.n_nodes
    u = np.zeros(ndof)
    eps_pl = np.zeros((ne * 8, 6))
    eq_pl = np.zeros(ne * 8)

    # unit-time affine field over all nodes; its restriction to the
    # prescribed dofs is the boundary condition, and extending the
    # increment affinely into the interior gives Newton a spike-free
    # initial guess (uniform strain instead of a one-voxel boundary layer)
    affine_unit = (grid.node_coords
                   @ (load.f_target - np.eye(3)).T).ravel()
    bc_unit = affine_unit.reshape(-1, 3)[grid.prescribed_nodes].ravel()

    n_steps = load.n_steps
    ts = np.zeros(n_steps)
    u_hist = np.zeros((n_steps, ndof))
    sig_hist = np.zeros((n_steps, ne, 8, 6))
    eqpl_hist = np.zeros((n_steps, ne, 8))
    newton_log = []

    def evaluate(u_work, eps_pl_in, eq_pl_in):
        strains = np.einsum(
            "gia,ea->egi", b_mats, grid.gather_element_dofs(u_work))
        out = material.return_map_batch(
            eps_pl_in, eq_pl_in, strains.reshape(-1, 6), props)
        sig = out["stress"].reshape(ne, 8, 6)
        f_el = w * np.einsum("gia,egi->ea", b_mats, sig)
        r_f = grid.scatter_add(f_el)[grid.free_dofs]
        return out, sig, r_f, float(np.linalg.norm(r_f))

    def substep(t_trial, t_base, u_in, eps_pl_in, eq_pl_in):
        u_work = u_in + (t_trial - t_base) * affine_unit
        u_work[grid.pres_dofs] = t_trial * bc_unit
        out, sig, r_f, rnorm = evaluate(u_work, eps_pl_in, eq_pl_in)
        res_hist = [rnorm]
        if not np.isfinite(rnorm):
            return None, res_hist
        for it in range(max_newton):
            if rnorm <= max(rel_tol * res_hist[0], abs_tol):
                return (u_work, out, sig), res_hist
            f1 = out["f1"].reshape(ne, 8)
            f2 = out["f2"].reshape(ne, 8)
            ke = np.broadcast_to(ke_el, (ne, 24, 24)).copy()
            if np.any(out["plastic"]):
                nhat = out["nhat"].reshape(ne, 8, 6)
                bn = np.einsum("gia,egi->ega", b_mats, nhat)
                ke -= np.einsum("eg,gab->eab", f1, kp)
                ke += np.einsum("eg,ega,egb->eab", w * f2, bn, bn)
            k_ff = plan.assemble_ff(ke)
            du = solver.solve(k_ff, -r_f)
            # near-flat hardening makes the full step overshoot badly
            # when a load increment plastifies a new region; backtrack
            # until the residual actually drops
            step = 1.0
            accepted = None
            for _ in range(8):
                u_try = u_work.copy()
                u_try[grid.free_dofs] += step * du
                trial = evaluate(u_try, eps_pl_in, eq_pl_in)
                if np.isfinite(trial[3]) and trial[3] < rnorm:
                    accepted = (u_try, trial)
                    break
                step *= 0.5
            if accepted is None:
                res_hist.append(trial[3])
                return None, res_hist
            u_work, (out, sig, r_f, rnorm) = accepted
            res_hist.append(rnorm)
        return None, res_hist

    t = 0.0
    for step in range(n_steps):
        t_next = (step + 1) / n_steps
        dt = t_next - t
        halvings = 0
        last_hist = []
        while t < t_next - 1e-14:
            result, res_hist = substep(t + dt, t, u, eps_pl, eq_pl)
            last_hist = res_hist
            if result is None:
                halvings += 1
                if halvings > max_halvings:
                    raise SolverError(
                        f"Newton diverged at step {step + 1} after "
                        f"{max_halvings} halvings",
                        step=step + 1, residual_history=res_hist)
                dt *= 0.5
                continue
            u_new, out, sig = result
            u = u_new
            eps_pl = out["eps_pl"]
            eq_pl = out["eq_pl"]
            t = min(t + dt, t_next)
            dt = min(dt, t_next - t) if t < t_next else dt
        ts[step] = t_next
        u_hist[step] = u
        sig_hist[step] = sig
        eqpl_hist[step] = eq_pl.reshape(ne, 8)
        newton_log.append(last_hist)

    return SolveResult(grid=grid, load=load, ts=ts, u_hist=u_hist,
                       sig_hist=sig_hist, eqpl_hist=eqpl_hist,
                       newton_log=newton_log)


@dataclass
class MacroState:
    """Homogenized state at one load step."""

    s1: np.ndarray       # undamaged stress, Voigt MPa
    sd: np.ndarray       # damaged stress, Voigt MPa
    e_m: np.ndarray      # macroscopic strain, engineering Voigt
    d_macro: float


@dataclass
class DamagePost:
    """Stabilized damage post-processing of a SolveResult.

    ``states`` holds the per-step homogenized MacroStates; the pointwise
    damaged stress field of any step is recomputed on demand (it is a
    closed-form map of the stored undamaged fields).
    """

    result: SolveResult
    params: material.DamageParams
    states: list = field(default_factory=list)

    def damage_field(self, step):
        return material.damage_value(self.result.eqpl_hist[step], self.params)

    def damaged_stress(self, step):
        d = self.damage_field(step)
        return (1.0 - d)[..., None] * self.result.sig_hist[step]


def macro_damage(sd, s1):
    """Scalar macroscopic damage 1 - |sd : s1| / (s1 : s1).

    Endpoints are exact: sd = s1 gives 0, sd = 0 gives 1.

    Raises
    ------
    ConstitutiveError
        When s1 : s1 = 0 (the ratio is undefined).
    """
    denom = voigt.double_contract(s1, s1)
    if denom == 0.0:
        raise ConstitutiveError(
            "macroscopic damage undefined for zero undamaged stress")
    return 1.0 - abs(voigt.double_contract(sd, s1)) / denom


def _macro_state(sig, eq_pl, e_m, params, vol_weight, loaded):
    d_field = material.damage_value(eq_pl, params)
    s1 = vol_weight * sig.sum(axis=(0, 1))
    sd = vol_weight * ((1.0 - d_field)[..., None] * sig).sum(axis=(0, 1))
    if voigt.double_contract(s1, s1) == 0.0:
        if loaded:
            raise ConstitutiveError(
                "homogenized undamaged stress is zero under nonzero load")
        d_macro = 0.0
    else:
        d_macro = macro_damage(sd, s1)
    return MacroState(s1=s1, sd=sd, e_m=e_m, d_macro=float(d_macro))


def stabilized_damage_post(result, params):
    """Map the undamaged solution to damaged homogenized states.

    Per point, D = damage_value(eq_pl) and S3 = (1 - D) S1 (the second
    reference is realized pointwise through E_el = C_el^{-1} S1, so the
    third-reference stress follows without another solve).  Volume
    averages are taken over the full cell volume (pores carry zero
    stress), and D_M = 1 - |Sd : S1| / (S1 : S1).

    Parameters
    ----------
    result : SolveResult
    params : DamageParams

    Returns
    -------
    DamagePost
    """
    grid = result.grid
    # each IP carries weight (h/2)^3, so sum over (elements, IPs) / V is
    # the volume average over the full cell (pores contribute zero)
    vol_weight = (grid.h / 2.0) ** 3 / grid.side_length ** 3
    f_dev = result.load.f_target - np.eye(3)
    loaded = bool(np.any(np.abs(f_dev) > 0))
    post = DamagePost(result=result, params=params)
    for step in range(result.n_steps):
        e_m = result.load.strain_voigt(result.ts[step])
        post.states.append(_macro_state(
            result.sig_hist[step], result.eqpl_hist[step], e_m, params,
            vol_weight, loaded and result.ts[step] > 0))
    return post


@dataclass
class ResponseCurve:
    """Scalar homogenized response history.

    The strain scalar is the (1,1) component of sym(F(t) - I); the stress
    scalars are the (1,1) components of the homogenized undamaged and
    damaged stresses.  ``uts`` is the maximum damaged stress over the
    path; ``toughness`` integrates damaged stress over strain from the
    unloaded origin (trapezoidal).
    """

    step: np.ndarray
    strain: np.ndarray
    stress_undamaged: np.ndarray
    stress_damaged: np.ndarray
    d_macro: np.ndarray
    uts: float = 0.0
    toughness: float = 0.0

    def __post_init__(self):
        if len(self.step) < 2:
            raise ConfigError("a response curve needs at least 2 steps")
        if np.any(np.diff(self.strain) <= 0):
            raise ConfigError("response strain must be strictly increasing")
        self.uts = float(np.max(self.stress_damaged))
        full_e = self.strain if self.strain[0] == 0.0 else \
            np.concatenate([[0.0], self.strain])
        full_s = self.stress_damaged if self.strain[0] == 0.0 else \
            np.concatenate([[0.0], self.stress_damaged])
        self.toughness = float(np.trapezoid(full_s, full_e))


def extract_responses(load, ts, states):
    """ResponseCurve from per-step macro states.

    Parameters
    ----------
    load : MacroLoad
    ts : (n,) array of pseudo-times
    states : list of MacroState

    Raises
    ------
    ConfigError
        With fewer than 2 recorded steps.
    """
    if len(states) < 2:
        raise ConfigError("insufficient history: need at least 2 steps")
    e11 = np.array([load.strain_voigt(t)[0] for t in ts])
    s1 = np.array([s.s1[0] for s in states])
    sd = np.array([s.sd[0] for s in states])
    dm = np.array([s.d_macro for s in states])
    return ResponseCurve(step=np.arange(1, len(ts) + 1), strain=e11,
                         stress_undamaged=s1, stress_damaged=sd, d_macro=dm)


def run_dns(mesh, props, damage_params, load, **solver_kwargs):
    """Full DNS pipeline: solve, damage post, response extraction."""
    result = solve_reference_rve(mesh, props, load, **solver_kwargs)
    post = stabilized_damage_post(result, damage_params)
    return extract_responses(load, result.ts, post.states)


def save_curve(curve, path):
    """Write a ResponseCurve CSV: the step table, then a summary record."""
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("step,strain,stress_undamaged,stress_damaged,d_macro\n")
        for i in range(len(curve.step)):
            f.write(f"{int(curve.step[i])},{float(curve.strain[i])!r},"
                    f"{float(curve.stress_undamaged[i])!r},"
                    f"{float(curve.stress_damaged[i])!r},"
                    f"{float(curve.d_macro[i])!r}\n")
        f.write("uts,toughness\n")
        f.write(f"{float(curve.uts)!r},{float(curve.toughness)!r}\n")


def load_curve(path):
    """Read a ResponseCurve written by save_curve."""
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip()
        if header != "step,strain,stress_undamaged,stress_damaged,d_macro":
            raise ConfigError(f"unexpected curve CSV header: {header}")
        rows = []
        summary = None
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line == "uts,toughness":
                summary = f.readline().strip()
                break
            rows.append(line.split(","))
    if not rows:
        raise ConfigError(f"empty curve file {path}")
    cols = list(zip(*rows))
    curve = ResponseCurve(
        step=np.array([int(v) for v in cols[0]]),
        strain=np.array([float(v) for v in cols[1]]),
        stress_undamaged=np.array([float(v) for v in cols[2]]),
        stress_damaged=np.array([float(v) for v in cols[3]]),
        d_macro=np.array([float(v) for v in cols[4]]))
    if summary is not None:
        uts, toughness = (float(v) for v in summary.split(","))
        if abs(uts - curve.uts) > 1e-9 * max(1.0, abs(uts)):
            raise ConfigError("curve summary uts does not match step data")
    return curve
