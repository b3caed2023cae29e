"""Latent-map Gaussian process over mixed quantitative/categorical inputs.

Categorical levels enter through one-hot encodings mapped by a learned
matrix into a low-dimensional latent space; correlation between two mixed
inputs is the quantitative Gaussian kernel times exp(-||dz||^2) of their
latent distance.  Fitting is joint maximum likelihood over the kernel
exponents and the latent map, so sources that behave alike end up close
in latent space and share statistical strength.
"""

from dataclasses import dataclass, field
import json

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from . import gp_core
from .errors import ConfigError, FitError

LMGP_FORMAT = "porocal-lmgp"
LMGP_VERSION = 1


@dataclass(frozen=True)
class CategoricalSpec:
    """Level structure of the categorical inputs.

    variables is a tuple of (name, level_count) pairs; levels are the
    integers 1..level_count.  Encodings are one-hot per variable,
    concatenated.
    """

    variables: tuple

    def __post_init__(self):
        if not self.variables:
            raise ConfigError("at least one categorical variable required")
        for name, m in self.variables:
            if int(m) != m or m < 1:
                raise ConfigError(f"level count for {name!r} must be a "
                                  f"positive integer, got {m!r}")

    @property
    def counts(self):
        return tuple(int(m) for _, m in self.variables)

    @property
    def total_levels(self):
        return sum(self.counts)

    def encode(self, t):
        """One-hot encode level combinations.

        Parameters
        ----------
        t : (n, d_t) or (d_t,) array of integer levels, 1-based.

        Returns
        -------
        (n, total_levels) float array.
        """
        t = np.atleast_2d(np.asarray(t))
        counts = self.counts
        if t.shape[1] != len(counts):
            raise ConfigError(f"expected {len(counts)} categorical "
                              f"variables, got {t.shape[1]}")
        ti = np.rint(t).astype(int)
        if not np.all(np.abs(t - ti) < 1e-9):
            raise ConfigError("categorical levels must be integers")
        tau = np.zeros((len(ti), self.total_levels))
        offset = 0
        for col, ((name, m)) in enumerate(self.variables):
            lev = ti[:, col]
            if np.any(lev < 1) or np.any(lev > m):
                bad = lev[(lev < 1) | (lev > m)][0]
                raise ConfigError(
                    f"unknown level {bad} for variable {name!r} "
                    f"(valid: 1..{m})")
            tau[np.arange(len(ti)), offset + lev - 1] = 1.0
            offset += m
        return tau


def spec_from_levels(t, names=None):
    """Build a CategoricalSpec from observed data, one level count per
    column, taking the observed maximum as the count."""
    t = np.atleast_2d(np.asarray(t))
    if names is None:
        names = tuple(f"t{i + 1}" for i in range(t.shape[1]))
    return CategoricalSpec(tuple(
        (names[i], int(np.rint(t[:, i].max()))) for i in range(t.shape[1])))


@dataclass
class LmgpConfig:
    """Training configuration for fit_lmgp."""

    n_starts: int = 8
    seed: int = 0
    nugget: float = 1e-8
    mean: str = "constant"
    w_bounds: tuple = (-6.0, 4.0)
    d_z: int = 2
    a_scale: float = 0.3
    # which categorical variable indexes independent [0,1] output
    # scalings: "auto" picks the last one when there are >= 2 variables
    # (the response-type convention), None scales globally
    scale_var: object = "auto"

    def __post_init__(self):
        if self.n_starts < 1:
            raise ConfigError("n_starts must be >= 1")
        if self.nugget < 0:
            raise ConfigError("nugget must be >= 0")
        if self.mean not in ("constant", "linear"):
            raise ConfigError(f"unknown mean function {self.mean!r}")
        if self.d_z < 1:
            raise ConfigError("d_z must be >= 1")
        if not (self.a_scale > 0):
            raise ConfigError("a_scale must be > 0")
        lo, hi = self.w_bounds
        if not lo < hi:
            raise ConfigError("w_bounds must be an increasing pair")


@dataclass
class LmgpModel:
    """Trained latent-map GP. Treat as immutable."""

    w: np.ndarray            # (d,) log10 kernel exponents
    a_mat: np.ndarray        # (total_levels, d_z) latent map
    beta: np.ndarray
    sigma2: float
    nugget: float
    mean: str
    spec: CategoricalSpec
    d_z: int
    x: np.ndarray            # (n, d) raw quantitative inputs
    t: np.ndarray            # (n, d_t) integer levels
    y: np.ndarray            # (n,) raw outputs
    x_lo: np.ndarray
    x_span: np.ndarray
    group_var: object        # int column of t, or None for global scaling
    group_levels: np.ndarray  # levels indexing y_lo/y_span rows
    y_lo: np.ndarray
    y_span: np.ndarray
    combos: np.ndarray       # (m, d_t) observed level combinations
    _x_std: np.ndarray = field(default=None, repr=False, compare=False)
    _z_train: np.ndarray = field(default=None, repr=False, compare=False)
    _chol: object = field(default=None, repr=False, compare=False)
    _alpha: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def n_train(self):
        return len(self.y)


def latent_map(t, model):
    """Latent position(s) of level combination(s): z = tau(t) A.

    Returns a (d_z,) vector for a single combination, (n, d_z) for a
    batch.  Unknown levels raise ConfigError.
    """
    t_arr = np.asarray(t)
    tau = model.spec.encode(t_arr)
    z = tau @ model.a_mat
    return z[0] if t_arr.ndim == 1 else z


def lmgp_corr(s, t, s_other, t_other, model):
    """Mixed-input correlation: gauss_corr on the quantitative part
    times exp(-||z - z'||^2) on the latent part."""
    dz = latent_map(np.atleast_1d(t), model) - latent_map(
        np.atleast_1d(t_other), model)
    return float(gp_core.gauss_corr(s, s_other, model.w)
                 * np.exp(-float(dz @ dz)))


def _z_sq_dists(z):
    diff = z[:, None, :] - z[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _corr_mixed(dists, dz2, w):
    return np.exp(-(np.tensordot(10.0 ** w, dists, axes=1) + dz2))


def _nll_and_grad_mixed(theta, dists, tau, f_mat, y, nugget, d, d_z):
    """Profiled negative log likelihood and gradient in (w, A_flat)."""
    w = theta[:d]
    a_mat = theta[d:].reshape(-1, d_z)
    z = tau @ a_mat
    dz2 = _z_sq_dists(z)
    r = _corr_mixed(dists, dz2, w)
    n = len(y)
    try:
        chol, _ = gp_core._chol_jitter(r, nugget)
    except FitError:
        return np.inf, np.zeros_like(theta)
    beta, alpha, sig2 = gp_core._profile(chol, f_mat, y)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    nll = 0.5 * n * np.log(sig2) + 0.5 * logdet + 0.5 * n

    rinv = cho_solve(chol, np.eye(n))
    m_mat = rinv - np.outer(alpha, alpha) / sig2
    g_mat = m_mat * r
    grad_w = np.empty(d)
    for i in range(d):
        grad_w[i] = 0.5 * np.log(10.0) * 10.0 ** w[i] * np.sum(
            g_mat * dists[i])
    # dR/dA_pq = -2 R (z_iq - z_jq)(tau_ip - tau_jp); the symmetric G and
    # antisymmetric z-difference collapse the double sum to one matvec
    grad_a = np.empty_like(a_mat)
    ones = np.ones(n)
    for q in range(d_z):
        d_q = z[:, q, None] - z[None, :, q]
        grad_a[:, q] = 2.0 * (tau.T @ ((g_mat * d_q) @ ones))
    return nll, np.concatenate([grad_w, grad_a.ravel()])


def _canonical_a(a_mat, tau_combos, d_t):
    """Shift and rotate the latent map so observed positions have zero
    mean and lie on principal axes with a deterministic sign."""
    z = tau_combos @ a_mat
    center = z.mean(axis=0)
    # every encoding has exactly d_t ones, so a uniform row shift
    # translates all latent positions equally
    a_mat = a_mat - center / d_t
    z = z - center
    # full_matrices keeps the rotation square (orthogonal) even when
    # there are fewer observed combinations than latent dimensions
    _, _, vt = np.linalg.svd(z, full_matrices=True)
    rot = vt.T
    a_mat = a_mat @ rot
    z = z @ rot
    for q in range(z.shape[1]):
        lead = np.argmax(np.abs(z[:, q]))
        if z[lead, q] < 0:
            a_mat[:, q] = -a_mat[:, q]
            z[:, q] = -z[:, q]
    return a_mat


def _resolve_group_var(scale_var, d_t):
    if scale_var == "auto":
        return d_t - 1 if d_t >= 2 else None
    if scale_var is None:
        return None
    gv = int(scale_var)
    if not 0 <= gv < d_t:
        raise ConfigError(f"scale_var {scale_var!r} out of range for "
                          f"{d_t} categorical variables")
    return gv


def _group_scale(y, t, group_var):
    """Per-group [0,1] output scaling; one global group when group_var
    is None."""
    if group_var is None:
        levels = np.array([0])
        gidx = np.zeros(len(y), dtype=int)
    else:
        col = t[:, group_var]
        levels = np.unique(col)
        gidx = np.searchsorted(levels, col)
    y_lo = np.empty(len(levels))
    y_span = np.empty(len(levels))
    for g in range(len(levels)):
        vals = y[gidx == g]
        y_lo[g] = vals.min()
        span = vals.max() - vals.min()
        y_span[g] = span if span > 0 else 1.0
    y_s = (y - y_lo[gidx]) / y_span[gidx]
    return y_s, levels, y_lo, y_span


def _query_groups(model, t):
    if model.group_var is None:
        return np.zeros(len(t), dtype=int)
    col = t[:, model.group_var]
    gidx = np.searchsorted(model.group_levels, col)
    gidx = np.clip(gidx, 0, len(model.group_levels) - 1)
    if np.any(model.group_levels[gidx] != col):
        bad = col[model.group_levels[gidx] != col][0]
        raise ConfigError(f"no output scaling for unseen level {bad}")
    return gidx


def _int_levels(t):
    t = np.atleast_2d(np.asarray(t))
    ti = np.rint(t).astype(int)
    if not np.all(np.abs(t - ti) < 1e-9):
        raise ConfigError("categorical levels must be integers")
    return ti


def _assemble(x, t, y, spec, w, a_mat, config):
    """Finish a model from data plus fixed hyperparameters: apply the
    canonical latent frame and compute the GLS quantities."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = _int_levels(t)
    y = np.asarray(y, dtype=float).ravel()
    d_t = len(spec.counts)

    x_lo = x.min(axis=0)
    x_span = x.max(axis=0) - x_lo
    if np.any(x_span == 0):
        col = int(np.where(x_span == 0)[0][0])
        raise ConfigError(f"input column {col} is constant; drop it "
                          "before fitting")
    x_std = (x - x_lo) / x_span

    group_var = _resolve_group_var(config.scale_var, d_t)
    y_s, levels, y_lo, y_span = _group_scale(y, t, group_var)

    combos = np.unique(t, axis=0)
    tau_combos = spec.encode(combos)
    a_mat = _canonical_a(np.asarray(a_mat, dtype=float), tau_combos, d_t)

    tau = spec.encode(t)
    z = tau @ a_mat
    dists = gp_core._sq_dists(x_std)
    r = _corr_mixed(dists, _z_sq_dists(z), w)
    f_mat = gp_core._basis(x_std, config.mean)
    chol, eta = gp_core._chol_jitter(r, config.nugget)
    beta, alpha, sig2 = gp_core._profile(chol, f_mat, y_s)

    return LmgpModel(
        w=np.asarray(w, dtype=float), a_mat=a_mat, beta=beta,
        sigma2=sig2, nugget=eta, mean=config.mean, spec=spec,
        d_z=a_mat.shape[1], x=x, t=t, y=y,
        x_lo=x_lo, x_span=x_span, group_var=group_var,
        group_levels=levels, y_lo=y_lo, y_span=y_span, combos=combos,
        _x_std=x_std, _z_train=z, _chol=chol, _alpha=alpha)


def fit_lmgp(x, y, t, spec=None, config=None):
    """Fit a latent-map GP to mixed-input data.

    Parameters
    ----------
    x : (n, d) array
        Quantitative inputs.
    y : (n,) array
        Outputs; min-max scaled to [0,1] internally, per response group
        (see LmgpConfig.scale_var).
    t : (n, d_t) array
        Integer categorical levels, 1-based.
    spec : CategoricalSpec, optional
        Level structure; inferred from the data when omitted.
    config : LmgpConfig, optional

    Returns
    -------
    LmgpModel

    Raises
    ------
    ConfigError
        On malformed inputs.
    FitError
        When every optimizer start fails.
    """
    config = config or LmgpConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = _int_levels(t)
    y = np.asarray(y, dtype=float).ravel()
    if len(x) != len(y) or len(t) != len(y):
        raise ConfigError("x, t and y must have matching lengths")
    if len(y) < 2:
        raise ConfigError("need at least 2 samples")
    if spec is None:
        spec = spec_from_levels(t)
    d = x.shape[1]
    d_z = config.d_z
    n_a = spec.total_levels * d_z

    x_lo = x.min(axis=0)
    x_span = x.max(axis=0) - x_lo
    if np.any(x_span == 0):
        col = int(np.where(x_span == 0)[0][0])
        raise ConfigError(f"input column {col} is constant; drop it "
                          "before fitting")
    x_std = (x - x_lo) / x_span
    group_var = _resolve_group_var(config.scale_var, len(spec.counts))
    y_s = _group_scale(y, t, group_var)[0]

    tau = spec.encode(t)
    dists = gp_core._sq_dists(x_std)
    f_mat = gp_core._basis(x_std, config.mean)

    rng = np.random.default_rng(config.seed)
    starts = []
    for k in range(config.n_starts):
        if k == 0:
            w0 = np.zeros(d)
        else:
            w0 = rng.uniform(*config.w_bounds, size=d)
        a0 = rng.normal(0.0, config.a_scale, size=n_a)
        starts.append(np.concatenate([w0, a0]))

    bounds = [config.w_bounds] * d + [(None, None)] * n_a
    best = None
    failures = []
    for k, theta0 in enumerate(starts):
        res = minimize(
            _nll_and_grad_mixed, theta0, jac=True, method="L-BFGS-B",
            bounds=bounds,
            args=(dists, tau, f_mat, y_s, config.nugget, d, d_z))
        if not np.isfinite(res.fun):
            failures.append(f"start {k}: non-finite likelihood")
            continue
        if best is None or res.fun < best[0]:
            best = (res.fun, k, res.x)
    if best is None:
        raise FitError("all optimizer starts failed: "
                       + "; ".join(failures))

    theta = best[2]
    return _assemble(x, t, y, spec, theta[:d],
                     theta[d:].reshape(-1, d_z), config)


def latent_positions(model):
    """Observed level combinations and their latent positions.

    Returns
    -------
    combos : (m, d_t) int array
    z : (m, d_z) array
    """
    return model.combos.copy(), model.spec.encode(model.combos) @ model.a_mat


def _ensure_caches(model):
    if model._chol is not None:
        return
    model._x_std = (model.x - model.x_lo) / model.x_span
    model._z_train = model.spec.encode(model.t) @ model.a_mat
    dists = gp_core._sq_dists(model._x_std)
    r = _corr_mixed(dists, _z_sq_dists(model._z_train), model.w)
    chol, _ = gp_core._chol_jitter(r, model.nugget)
    f_mat = gp_core._basis(model._x_std, model.mean)
    y_s = _scaled_outputs(model)
    _, alpha, _ = gp_core._profile(chol, f_mat, y_s)
    model._chol = chol
    model._alpha = alpha


def _scaled_outputs(model):
    gidx = _query_groups(model, model.t)
    return (model.y - model.y_lo[gidx]) / model.y_span[gidx]


def predict_lmgp(model, s, t):
    """Predictive mean and variance at mixed query points.

    Parameters
    ----------
    model : LmgpModel
    s : (m, d) or (d,) array of quantitative inputs
    t : (m, d_t) or (d_t,) matching categorical levels

    Returns
    -------
    (mean, variance), de-scaled to raw output units per response group.
    Floats for a single query.

    Raises
    ------
    ConfigError
        For a level combination absent from the training data.
    """
    from scipy.linalg import cho_solve

    _ensure_caches(model)
    s_arr = np.asarray(s, dtype=float)
    single = s_arr.ndim == 1
    s2 = np.atleast_2d(s_arr)
    t2 = np.atleast_2d(np.asarray(t))
    if len(t2) == 1 and len(s2) > 1:
        t2 = np.broadcast_to(t2, (len(s2), t2.shape[1]))
    if s2.shape[1] != model.x.shape[1]:
        raise ConfigError(f"expected {model.x.shape[1]} quantitative "
                          f"inputs, got {s2.shape[1]}")
    if len(t2) != len(s2):
        raise ConfigError("s and t must have matching lengths")

    t_int = np.rint(t2).astype(int)
    known = (t_int[:, None, :] == model.combos[None, :, :]).all(-1).any(1)
    if not np.all(known):
        bad = t_int[~known][0]
        raise ConfigError(f"level combination {tuple(bad)} was not in "
                          "the training data")

    s_std = (s2 - model.x_lo) / model.x_span
    z_star = model.spec.encode(t_int) @ model.a_mat

    diff = s_std[:, None, :] - model._x_std[None, :, :]
    quad = np.tensordot(diff ** 2, 10.0 ** model.w, axes=([2], [0]))
    dz = z_star[:, None, :] - model._z_train[None, :, :]
    quad += np.einsum("mnk,mnk->mn", dz, dz)
    r_star = np.exp(-quad)

    f_star = gp_core._basis(s_std, model.mean)
    mean_std = (np.einsum("mk,k->m", f_star, model.beta)
                + np.einsum("mn,n->m", r_star, model._alpha))
    rinv_r = cho_solve(model._chol, r_star.T)
    var_std = model.sigma2 * np.maximum(
        1.0 - np.einsum("mn,nm->m", r_star, rinv_r), 0.0)

    gidx = _query_groups(model, t_int)
    mean = model.y_lo[gidx] + mean_std * model.y_span[gidx]
    var = var_std * model.y_span[gidx] ** 2
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def save_lmgp(model, path):
    """Serialize a trained model to a versioned JSON document."""
    doc = {
        "format": LMGP_FORMAT,
        "version": LMGP_VERSION,
        "mean": model.mean,
        "d_z": model.d_z,
        "variables": [[n, int(m)] for n, m in model.spec.variables],
        "group_var": model.group_var,
        "w": model.w.tolist(),
        "a_mat": model.a_mat.tolist(),
        "beta": model.beta.tolist(),
        "sigma2": model.sigma2,
        "nugget": model.nugget,
        "x_lo": model.x_lo.tolist(),
        "x_span": model.x_span.tolist(),
        "group_levels": model.group_levels.tolist(),
        "y_lo": model.y_lo.tolist(),
        "y_span": model.y_span.tolist(),
        "combos": model.combos.tolist(),
        "x": model.x.tolist(),
        "t": model.t.tolist(),
        "y": model.y.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_lmgp(path):
    """Load a model saved by save_lmgp."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != LMGP_FORMAT:
        raise ConfigError(f"not a {LMGP_FORMAT} document: "
                          f"{doc.get('format')!r}")
    if doc.get("version") != LMGP_VERSION:
        raise ConfigError(f"unsupported version {doc.get('version')!r}")
    spec = CategoricalSpec(tuple((n, int(m)) for n, m in doc["variables"]))
    return LmgpModel(
        w=np.array(doc["w"]), a_mat=np.array(doc["a_mat"]),
        beta=np.array(doc["beta"]), sigma2=doc["sigma2"],
        nugget=doc["nugget"], mean=doc["mean"], spec=spec,
        d_z=doc["d_z"], x=np.array(doc["x"]),
        t=np.array(doc["t"], dtype=int), y=np.array(doc["y"]),
        x_lo=np.array(doc["x_lo"]), x_span=np.array(doc["x_span"]),
        group_var=doc["group_var"],
        group_levels=np.array(doc["group_levels"]),
        y_lo=np.array(doc["y_lo"]), y_span=np.array(doc["y_span"]),
        combos=np.array(doc["combos"], dtype=int))
