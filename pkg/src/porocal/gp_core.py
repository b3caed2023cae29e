"""Gaussian-process regression with a Gaussian (squared exponential)
kernel, profiled-likelihood hyperparameter estimation, and prediction.

The kernel weight on input dimension i is 10**w_i, so the optimizer
searches roughness exponents on a log scale.  The mean coefficients and
the process variance have closed forms given the exponents (generalized
least squares), so maximum likelihood reduces to a box-bounded search
over w alone.  Inputs are min-max scaled to [0,1] and outputs
standardized to zero mean and unit variance inside ``fit_gp``; the pure
math functions (``gauss_corr``, ``neg_log_likelihood``) operate on data
as given.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import ConfigError, FitError

# jitter escalation ceiling; beyond this the matrix is treated as
# genuinely rank-deficient rather than merely ill conditioned
MAX_NUGGET = 1e-4

_LN10 = float(np.log(10.0))


@dataclass
class GpConfig:
    """Training configuration.

    Attributes
    ----------
    n_starts : int
        Multi-start count for the exponent search.
    seed : int
        Seed for the start points (start 0 is always w = 0).
    nugget : float
        Noise variance added to the correlation diagonal.  Simulations
        are deterministic, so this is jitter, not a noise model.
    mean : str
        Mean basis: "constant" (ordinary kriging) or "linear".
    w_bounds : tuple
        Box bounds on each roughness exponent.
    """

    n_starts: int = 8
    seed: int = 0
    nugget: float = 1e-8
    mean: str = "constant"
    w_bounds: tuple = (-6.0, 4.0)

    def __post_init__(self):
        if self.n_starts < 1:
            raise ConfigError(f"n_starts must be >= 1, got {self.n_starts}")
        if self.nugget < 0:
            raise ConfigError(f"nugget must be >= 0, got {self.nugget}")
        if self.mean not in ("constant", "linear"):
            raise ConfigError(f"unknown mean basis {self.mean!r}")
        lo, hi = self.w_bounds
        if not lo < hi:
            raise ConfigError("w_bounds must be an increasing pair")


@dataclass(eq=False)
class GpModel:
    """Trained Gaussian process.

    Raw training data plus standardization parameters are stored so the
    model serializes without loss; the Cholesky factor and GLS residual
    weights are rebuilt on load.
    """

    w: np.ndarray            # (d,) roughness exponents
    beta: np.ndarray         # mean-basis coefficients
    sigma2: float            # process variance (standardized outputs)
    nugget: float
    mean: str
    x: np.ndarray            # (n, d) raw training inputs
    y: np.ndarray            # (n,) raw training outputs
    x_lo: np.ndarray         # per-column input minima
    x_span: np.ndarray       # per-column input ranges
    y_mean: float
    y_sd: float
    # rebuilt caches, never serialized
    x_std: np.ndarray = field(default=None, repr=False)
    _chol: tuple = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    @property
    def n_train(self):
        return len(self.y)


def gauss_corr(s, s_other, w):
    """Gaussian correlation exp(-sum_i 10**w_i (s_i - s'_i)**2).

    Parameters
    ----------
    s, s_other : array_like
        Points of equal dimension; leading axes broadcast.
    w : array_like
        Roughness exponents, one per trailing dimension.

    Returns
    -------
    float or ndarray in (0, 1], 1 exactly at zero separation.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    s_other = np.atleast_1d(np.asarray(s_other, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if s.shape[-1] != s_other.shape[-1] or s.shape[-1] != w.shape[-1]:
        raise ConfigError("gauss_corr arguments disagree on dimension")
    d2 = (10.0 ** w) * (s - s_other) ** 2
    out = np.exp(-d2.sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def _sq_dists(x):
    """Per-dimension squared separations, shape (d, n, n)."""
    diff = x[:, None, :] - x[None, :, :]
    return np.ascontiguousarray(np.moveaxis(diff ** 2, -1, 0))


def _corr_matrix(dists, w):
    return np.exp(-np.tensordot(10.0 ** np.asarray(w), dists, axes=1))


def _basis(x_std, mean):
    n = len(x_std)
    if mean == "constant":
        return np.ones((n, 1))
    return np.hstack([np.ones((n, 1)), x_std])


def _chol_jitter(r_mat, nugget):
    """Cholesky of r_mat + nugget*I, escalating the jitter tenfold up to
    MAX_NUGGET; raises FitError when that fails (rank-deficient R)."""
    eta = nugget
    while True:
        try:
            chol = cho_factor(r_mat + eta * np.eye(len(r_mat)), lower=True)
            return chol, eta
        except LinAlgError:
            if eta == 0.0 or eta * 10.0 > MAX_NUGGET:
                raise FitError(
                    "correlation matrix is not positive definite "
                    f"(nugget {nugget:g}, escalated to {eta:g})")
            eta *= 10.0


def _profile(chol, f_mat, y):
    """Closed-form GLS mean coefficients and process variance."""
    n = len(y)
    rinv_f = cho_solve(chol, f_mat)
    rinv_y = cho_solve(chol, y)
    gram = f_mat.T @ rinv_f
    beta = np.linalg.solve(gram, f_mat.T @ rinv_y)
    resid = y - f_mat @ beta
    alpha = cho_solve(chol, resid)
    sig2 = max(float(resid @ alpha) / n, 1e-30)
    return beta, alpha, sig2


def neg_log_likelihood(w, x, y, nugget=0.0, mean="constant"):
    """Profiled negative log likelihood of the exponents w.

    The mean coefficients and process variance are replaced by their
    generalized-least-squares optima, so this is
    (n/2) log sigma2_hat + (1/2) log|R| + n/2 computed via Cholesky.
    Data are used exactly as given (no standardization).

    Raises
    ------
    ConfigError
        Fewer than two training points.
    FitError
        R not positive definite even after jitter escalation.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ConfigError("need at least 2 training points")
    r_mat = _corr_matrix(_sq_dists(x), w)
    chol, _ = _chol_jitter(r_mat, nugget)
    _, _, sig2 = _profile(chol, _basis(x, mean), y)
    logdet = 2.0 * np.log(np.diag(chol[0])).sum()
    n = len(y)
    return 0.5 * n * np.log(sig2) + 0.5 * logdet + 0.5 * n


def _nll_and_grad(w, dists, f_mat, y, nugget):
    """Value and analytic gradient of the profiled NLL in w."""
    n = len(y)
    r_mat = _corr_matrix(dists, w)
    chol, _ = _chol_jitter(r_mat, nugget)
    beta, alpha, sig2 = _profile(chol, f_mat, y)
    logdet = 2.0 * np.log(np.diag(chol[0])).sum()
    nll = 0.5 * n * np.log(sig2) + 0.5 * logdet + 0.5 * n
    rinv = cho_solve(chol, np.eye(n))
    # d nll = 0.5 sum(M o dR), with the profiled-variance envelope term
    m_mat = rinv - np.outer(alpha, alpha) / sig2
    prod = m_mat * r_mat
    grad = np.array([
        -0.5 * _LN10 * (10.0 ** wi) * float(np.sum(prod * di))
        for wi, di in zip(w, dists)])
    return nll, grad


def fit_gp(x, y, config=None):
    """Fit a GP by multi-start bounded quasi-Newton maximum likelihood.

    Inputs are min-max scaled to [0,1] per column and outputs
    standardized; the exponent search runs over config.w_bounds with
    analytic gradients.  Start 0 is w = 0, the rest are seeded uniform
    draws, and ties between converged starts break on start index, so
    the fit is deterministic given (data, seed).

    Parameters
    ----------
    x : (n, d) array_like
    y : (n,) array_like
    config : GpConfig, optional

    Returns
    -------
    GpModel

    Raises
    ------
    ConfigError
        Degenerate data (constant input column, < 2 points).
    FitError
        Every start failed with a conditioning error.
    """
    config = config or GpConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != len(x):
        raise ConfigError("x and y lengths disagree")
    if len(y) < 2:
        raise ConfigError("need at least 2 training points")
    x_lo = x.min(axis=0)
    x_span = x.max(axis=0) - x_lo
    if np.any(x_span == 0.0):
        cols = np.nonzero(x_span == 0.0)[0]
        raise ConfigError(f"input column(s) {cols.tolist()} are constant")
    x_std = (x - x_lo) / x_span
    y_mean = float(y.mean())
    y_sd = float(y.std())
    if y_sd == 0.0:
        y_sd = 1.0
    y_std = (y - y_mean) / y_sd

    dists = _sq_dists(x_std)
    f_mat = _basis(x_std, config.mean)
    d = x.shape[1]
    lo, hi = config.w_bounds
    rng = np.random.default_rng(config.seed)
    starts = [np.zeros(d)]
    starts += [rng.uniform(lo, hi, size=d) for _ in range(config.n_starts - 1)]

    best = None
    for idx, w0 in enumerate(starts):
        try:
            res = minimize(
                _nll_and_grad, w0, args=(dists, f_mat, y_std, config.nugget),
                method="L-BFGS-B", jac=True, bounds=[(lo, hi)] * d)
        except FitError:
            continue
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best[0]:
            best = (float(res.fun), idx, res.x)
    if best is None:
        raise FitError(f"all {config.n_starts} starts failed conditioning")

    w_opt = best[2]
    r_mat = _corr_matrix(dists, w_opt)
    chol, eta = _chol_jitter(r_mat, config.nugget)
    beta, alpha, sig2 = _profile(chol, f_mat, y_std)
    return GpModel(w=w_opt, beta=beta, sigma2=sig2, nugget=eta,
                   mean=config.mean, x=x, y=y, x_lo=x_lo, x_span=x_span,
                   y_mean=y_mean, y_sd=y_sd,
                   x_std=x_std, _chol=chol, _alpha=alpha)


def _ensure_caches(model):
    if model._chol is None:
        model.x_std = (model.x - model.x_lo) / model.x_span
        dists = _sq_dists(model.x_std)
        r_mat = _corr_matrix(dists, model.w)
        model._chol, _ = _chol_jitter(r_mat, model.nugget)
        f_mat = _basis(model.x_std, model.mean)
        y_std = (model.y - model.y_mean) / model.y_sd
        resid = y_std - f_mat @ model.beta
        model._alpha = cho_solve(model._chol, resid)
    return model


def predict(model, s):
    """Conditional-Gaussian prediction at query points.

    Parameters
    ----------
    model : GpModel
    s : (d,) or (m, d) array_like
        Raw (unscaled) query inputs.

    Returns
    -------
    (mean, variance)
        Floats for a single query, (m,) arrays for a batch.  Variance is
        sigma2 * (1 - r' R^-1 r), clipped at zero and de-standardized.
    """
    _ensure_caches(model)
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    s_std = (s2 - model.x_lo) / model.x_span
    diff = s_std[:, None, :] - model.x_std[None, :, :]
    r_star = np.exp(-((10.0 ** model.w) * diff ** 2).sum(axis=-1))
    f_star = _basis(s_std, model.mean)
    # einsum keeps the accumulation order independent of batch size, so
    # batch and one-at-a-time queries agree to the last bit
    mean_std = (np.einsum("mk,k->m", f_star, model.beta)
                + np.einsum("mn,n->m", r_star, model._alpha))
    rinv_r = cho_solve(model._chol, r_star.T)
    var_std = model.sigma2 * np.maximum(
        1.0 - np.einsum("mn,nm->m", r_star, rinv_r), 0.0)
    mean = mean_std * model.y_sd + model.y_mean
    var = var_std * model.y_sd ** 2
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def relative_error(preds, truths):
    """Mean relative prediction error (1/N) sum_i |y_hat_i - y_i|/|y_i|.

    Rows are treated as vectors (scalars allowed); a zero-norm truth row
    raises ZeroDivisionError.
    """
    preds = np.atleast_1d(np.asarray(preds, dtype=float))
    truths = np.atleast_1d(np.asarray(truths, dtype=float))
    if preds.shape != truths.shape:
        raise ConfigError("preds and truths shapes disagree")
    if preds.ndim == 1:
        preds = preds[:, None]
        truths = truths[:, None]
    denom = np.linalg.norm(truths, axis=1)
    if np.any(denom == 0.0):
        raise ZeroDivisionError("zero-norm truth row in relative_error")
    num = np.linalg.norm(preds - truths, axis=1)
    return float(np.mean(num / denom))


GP_FORMAT = "porocal-gp"
GP_VERSION = 1


def save_gp(model, path):
    """Write a model as a versioned JSON document (lossless round trip)."""
    doc = {
        "format": GP_FORMAT,
        "version": GP_VERSION,
        "mean": model.mean,
        "nugget": model.nugget,
        "sigma2": model.sigma2,
        "w": model.w.tolist(),
        "beta": model.beta.tolist(),
        "x_lo": model.x_lo.tolist(),
        "x_span": model.x_span.tolist(),
        "y_mean": model.y_mean,
        "y_sd": model.y_sd,
        "x": model.x.tolist(),
        "y": model.y.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_gp(path):
    """Load a model written by save_gp; caches rebuild lazily."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != GP_FORMAT or doc.get("version") != GP_VERSION:
        raise ConfigError(f"not a {GP_FORMAT} v{GP_VERSION} document: {path}")
    return GpModel(
        w=np.array(doc["w"], dtype=float),
        beta=np.array(doc["beta"], dtype=float),
        sigma2=float(doc["sigma2"]),
        nugget=float(doc["nugget"]),
        mean=doc["mean"],
        x=np.array(doc["x"], dtype=float),
        y=np.array(doc["y"], dtype=float),
        x_lo=np.array(doc["x_lo"], dtype=float),
        x_span=np.array(doc["x_span"], dtype=float),
        y_mean=float(doc["y_mean"]),
        y_sd=float(doc["y_sd"]))
