"""Constitutive models: isotropic elasticity, J2 plasticity with
piecewise-linear isotropic hardening, and the progressive damage law.

All point-wise functions are pure and vectorized over leading axes where
noted.  Damage is evaluated from the undamaged plastic state and never
feeds back into equilibrium; the solver modules rely on that split.
"""

from dataclasses import dataclass, field

import numpy as np

from . import voigt
from .errors import ConfigError, ConstitutiveError

# default hardening curve (eq. plastic strain, yield stress MPa); this is
# configuration, not a calibrated constant
DEFAULT_HARDENING = ((0.0, 170.0), (0.02, 230.0), (0.10, 280.0))


@dataclass(frozen=True)
class MaterialProps:
    """Elasto-plastic material parameters.

    Attributes
    ----------
    young : float
        Young's modulus (MPa).
    poisson : float
        Poisson's ratio.
    hardening : tuple of (float, float)
        Ordered (equivalent plastic strain, yield stress MPa) pairs;
        strictly increasing strain, non-decreasing stress, first entry
        at strain 0 with positive stress.
    """

    young: float = 5.7e4
    poisson: float = 0.33
    hardening: tuple = DEFAULT_HARDENING

    def __post_init__(self):
        if self.young <= 0:
            raise ConfigError(f"young must be positive, got {self.young}")
        if not 0 < self.poisson < 0.5:
            raise ConfigError(f"poisson must lie in (0, 0.5), got {self.poisson}")
        tab = np.asarray(self.hardening, dtype=float)
        if tab.ndim != 2 or tab.shape[1] != 2 or tab.shape[0] < 1:
            raise ConfigError("hardening must be a table of (strain, stress) pairs")
        if tab[0, 0] != 0.0:
            raise ConfigError("hardening table must start at strain 0")
        if tab[0, 1] <= 0.0:
            raise ConfigError("initial yield stress must be positive")
        if np.any(np.diff(tab[:, 0]) <= 0):
            raise ConfigError("hardening strains must be strictly increasing")
        if np.any(np.diff(tab[:, 1]) < 0):
            raise ConfigError("hardening stresses must be non-decreasing")
        object.__setattr__(self, "hardening", tuple(map(tuple, tab)))

    @property
    def table(self):
        return np.asarray(self.hardening, dtype=float)


@dataclass(frozen=True)
class DamageParams:
    """Progressive damage parameters: critical equivalent plastic strain
    ``e_cr`` and damage evolutionary rate ``alpha``."""

    e_cr: float = 0.03
    alpha: float = 100.0

    def __post_init__(self):
        if self.e_cr <= 0:
            raise ConfigError(f"e_cr must be positive, got {self.e_cr}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")


@dataclass
class PointState:
    """Integration-point state: plastic strain (engineering Voigt),
    equivalent plastic strain, and the damage value derived from it.

    The return map updates ``eps_pl`` and ``eq_pl``; ``damage`` is filled
    by post-processing and is carried along unchanged here.
    """

    eps_pl: np.ndarray = field(default_factory=lambda: np.zeros(6))
    eq_pl: float = 0.0
    damage: float = 0.0


def lame_constants(props):
    """Return (lambda, mu) in MPa from Young's modulus and Poisson ratio."""
    y, nu = props.young, props.poisson
    if abs(nu - 0.5) < 1e-6:
        raise ConfigError("poisson ratio at the incompressible limit")
    lam = y * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = y / (2.0 * (1.0 + nu))
    return lam, mu


def elastic_tangent(props):
    """Isotropic elastic stiffness, 6x6 acting on engineering strain."""
    lam, mu = lame_constants(props)
    return lam * voigt.JJ + 2.0 * mu * voigt.IV


def yield_stress(eq_pl, props):
    """Piecewise-linear hardening curve, clamped to the last table value.

    Vectorized over ``eq_pl``.
    """
    tab = props.table
    return np.interp(eq_pl, tab[:, 0], tab[:, 1])


def damage_value(eq_pl, params):
    """Micro damage D_m from equivalent plastic strain.

    Zero up to the critical strain, then
    1 - (e_cr/eq_pl) exp(-alpha (eq_pl - e_cr)), clamped to [0, 1].
    Vectorized over ``eq_pl``.
    """
    e = np.asarray(eq_pl, dtype=float)
    e_cr, alpha = params.e_cr, params.alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        d = 1.0 - (e_cr / e) * np.exp(-alpha * (e - e_cr))
    d = np.where(e <= e_cr, 0.0, d)
    d = np.clip(d, 0.0, 1.0)
    return float(d) if np.isscalar(eq_pl) else d


def _solve_consistency(q_tr, eq_pl, mu3, tab):
    """Exact segment-wise solution of q_tr - 3mu dgamma = S_Y(eq_pl + dgamma).

    The hardening curve is piecewise linear, so on each segment the
    consistency equation is linear in the new equivalent plastic strain.
    Returns (eq_new, hardening slope at the solution).  Inputs are arrays
    over plastic points only.
    """
    strains, stresses = tab[:, 0], tab[:, 1]
    nseg = len(strains) - 1
    eq_new = np.full_like(q_tr, np.nan)
    h_out = np.zeros_like(q_tr)
    for k in range(nseg):
        e0, e1 = strains[k], strains[k + 1]
        h = (stresses[k + 1] - stresses[k]) / (e1 - e0)
        cand = (q_tr + mu3 * eq_pl - stresses[k] + h * e0) / (mu3 + h)
        lo = np.maximum(e0, eq_pl)
        ok = np.isnan(eq_new) & (cand >= lo - 1e-15) & (cand <= e1 + 1e-15)
        eq_new = np.where(ok, cand, eq_new)
        h_out = np.where(ok, h, h_out)
    # flat continuation beyond the table
    cand = eq_pl + (q_tr - stresses[-1]) / mu3
    ok = np.isnan(eq_new) & (cand >= np.maximum(strains[-1], eq_pl) - 1e-15)
    eq_new = np.where(ok, cand, eq_new)
    if np.any(np.isnan(eq_new)):
        raise ConstitutiveError("return-map consistency equation has no root")
    return eq_new, h_out


def return_map_batch(eps_pl, eq_pl, strain, props):
    """Vectorized radial return over n integration points.

    Parameters
    ----------
    eps_pl : (n, 6) array
        Plastic strain, engineering Voigt.
    eq_pl : (n,) array
        Equivalent plastic strain.
    strain : (n, 6) array
        Total strain, engineering Voigt.
    props : MaterialProps

    Returns
    -------
    dict with keys
        stress (n, 6), eps_pl (n, 6), eq_pl (n,), plastic (n,) bool,
        f1 (n,), f2 (n,), nhat (n, 6), where the consistent tangent is
        C_el - f1 PV + f2 nhat nhat^T (f1 = f2 = 0 on elastic points).
    """
    lam, mu = lame_constants(props)
    eps_e = strain - eps_pl
    tr = voigt.trace(eps_e)
    stress_tr = 2.0 * mu * (eps_e @ voigt.IV) + lam * tr[:, None] * voigt.ID6
    s_tr = voigt.deviator(stress_tr)
    q_tr = voigt.mises(stress_tr)
    sy = yield_stress(eq_pl, props)
    plastic = q_tr > sy * (1.0 + 1e-12)

    n = len(q_tr)
    out_stress = stress_tr.copy()
    out_eps_pl = eps_pl.copy()
    out_eq_pl = eq_pl.copy()
    f1 = np.zeros(n)
    f2 = np.zeros(n)
    nhat = np.zeros((n, 6))

    if np.any(plastic):
        idx = np.where(plastic)[0]
        qp = q_tr[idx]
        eq_new, h = _solve_consistency(qp, eq_pl[idx], 3.0 * mu, props.table)
        dgam = eq_new - eq_pl[idx]
        sp = s_tr[idx]
        scale = 3.0 * mu * dgam / qp
        out_stress[idx] = stress_tr[idx] - scale[:, None] * sp
        # plastic strain increment in engineering components
        out_eps_pl[idx] = eps_pl[idx] + (1.5 * dgam / qp)[:, None] * (
            sp * voigt.FROB_W)
        out_eq_pl[idx] = eq_new
        f1[idx] = 6.0 * mu ** 2 * dgam / qp
        f2[idx] = 6.0 * mu ** 2 * (dgam / qp - 1.0 / (3.0 * mu + h))
        nhat[idx] = sp / (qp * np.sqrt(2.0 / 3.0))[:, None]

    return {
        "stress": out_stress,
        "eps_pl": out_eps_pl,
        "eq_pl": out_eq_pl,
        "plastic": plastic,
        "f1": f1,
        "f2": f2,
        "nhat": nhat,
    }


def tangent_from_factors(props, f1, f2, nhat):
    """Assemble the 6x6 consistent tangent from return-map factors."""
    c = elastic_tangent(props)
    if f1 != 0.0 or f2 != 0.0:
        c = c - f1 * voigt.PV + f2 * np.outer(nhat, nhat)
    return c


def j2_return_map(state, strain, props):
    """Radial-return update of a single integration point.

    Parameters
    ----------
    state : PointState
    strain : (6,) array
        Total strain, engineering Voigt.
    props : MaterialProps

    Returns
    -------
    (stress, new_state, tangent)
        Stress vector (6,), updated PointState, and the consistent
        tangent (6x6).  Elastic steps leave the state unchanged and
        return the elastic tangent.
    """
    strain = np.asarray(strain, dtype=float)
    r = return_map_batch(state.eps_pl[None, :], np.array([state.eq_pl]),
                         strain[None, :], props)
    new_state = PointState(eps_pl=r["eps_pl"][0], eq_pl=float(r["eq_pl"][0]),
                           damage=state.damage)
    tangent = tangent_from_factors(props, float(r["f1"][0]), float(r["f2"][0]),
                                   r["nhat"][0])
    return r["stress"][0], new_state, tangent
