"""Porous RVE generation: descriptor sampling, ellipsoid reconstruction,
voxelization, and descriptor measurement.

Geometry lives in a unit-side cube by default; the ``rd`` descriptor is a
fraction of the RVE side L.  All randomness flows through a single seeded
generator per call, so identical (inputs, seed) give bit-identical output.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import qmc

from .errors import ConfigError, ConnectivityError, ReconstructionError

# Descriptor bounds: vf, np, ar, rd (rd as fraction of L).  Configurable
# wherever a ``bounds`` argument is accepted.
DEFAULT_BOUNDS = {
    "vf": (0.01, 0.20),
    "np": (10, 100),
    "ar": (1.0, 5.0),
    "rd": (0.10, 0.50),
}

MESH_FORMAT_VERSION = 1

# resolution used internally by reconstruct for volume-fraction matching
_CALIBRATION_RESOLUTION = 32


@dataclass(frozen=True)
class RveDescriptors:
    """Pore morphology descriptors.

    Attributes
    ----------
    vf : float
        Pore volume fraction.
    np : int
        Pore count.
    ar : float
        Ellipsoid aspect ratio (major/minor, >= 1).
    rd : float
        Mean nearest-neighbor centroid distance as a fraction of L.
    """

    vf: float
    np: int
    ar: float
    rd: float

    def validate(self, bounds=None):
        b = dict(DEFAULT_BOUNDS, **(bounds or {}))
        for name, val in (("vf", self.vf), ("np", self.np),
                          ("ar", self.ar), ("rd", self.rd)):
            lo, hi = b[name]
            if not lo <= val <= hi:
                raise ConfigError(
                    f"descriptor {name}={val} outside bounds [{lo}, {hi}]")
        return self

    def as_array(self):
        return np.array([self.vf, self.np, self.ar, self.rd], dtype=float)


@dataclass
class PoreSet:
    """Collection of (possibly overlapping) ellipsoidal pores.

    Attributes
    ----------
    centers : (n, 3) array in [0, L]^3
    semiaxes : (n, 3) array, per-pore (a, b, b) with a the major axis
    quats : (n, 4) array of unit quaternions (w, x, y, z)
    rve_side : float
    """

    centers: np.ndarray
    semiaxes: np.ndarray
    quats: np.ndarray
    rve_side: float = 1.0

    def __len__(self):
        return len(self.centers)

    def scaled(self, factor):
        return PoreSet(self.centers, self.semiaxes * factor, self.quats,
                       self.rve_side)


@dataclass
class VoxelMesh:
    """Structured voxel discretization with a pore/matrix indicator.

    ``indicator`` is a (res, res, res) uint8 array, 0 = matrix, 1 = pore,
    indexed [ix, iy, iz] with voxel (ix, iy, iz) spanning
    [ix h, (ix+1) h) x ... for h = side_length / resolution.
    """

    resolution: int
    side_length: float
    indicator: np.ndarray

    @property
    def measured_vf(self):
        return float(np.count_nonzero(self.indicator)) / self.indicator.size


def _quat_to_rot(quats):
    """Unit quaternions (n, 4), scalar first -> rotation matrices (n, 3, 3)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def _nearest_neighbor_distances(centers):
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1), d.argmin(axis=1)


def sample_descriptors(n, bounds=None, seed=0):
    """Draw descriptor points from the base-2 low-discrepancy sequence.

    The sequence is unscrambled, with the all-zeros initial point skipped,
    so the first retained point is 0.5 in every scaled coordinate.  The
    seed does not alter the sequence (randomness enters later, through
    reconstruction seeds); it is accepted so call sites can thread one
    seed through the whole pipeline.

    Parameters
    ----------
    n : int
        Number of points.
    bounds : dict, optional
        Overrides for DEFAULT_BOUNDS entries.
    seed : int

    Returns
    -------
    list of RveDescriptors
    """
    if n < 0:
        raise ConfigError(f"n must be non-negative, got {n}")
    b = dict(DEFAULT_BOUNDS, **(bounds or {}))
    for name, (lo, hi) in b.items():
        if not lo < hi:
            raise ConfigError(f"invalid bounds for {name}: [{lo}, {hi}]")
    if n == 0:
        return []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # power-of-two balance warning
        pts = qmc.Sobol(d=4, scramble=False).random(n + 1)[1:]
    lo = np.array([b["vf"][0], b["np"][0], b["ar"][0], b["rd"][0]])
    hi = np.array([b["vf"][1], b["np"][1], b["ar"][1], b["rd"][1]])
    scaled = lo + pts * (hi - lo)
    return [RveDescriptors(vf=float(r[0]), np=int(round(r[1])),
                           ar=float(r[2]), rd=float(r[3]))
            for r in scaled]


def _fps_pick(pool, k):
    """Greedy farthest-point subset of k rows from pool."""
    idx = [0]
    mind = np.linalg.norm(pool - pool[0], axis=1)
    while len(idx) < k:
        i = int(mind.argmax())
        idx.append(i)
        mind = np.minimum(mind, np.linalg.norm(pool - pool[i], axis=1))
    return pool[idx]


def _max_spread(n, rng):
    """n points near the maximum attainable mean nearest-neighbor distance:
    a boundary-inclusive cubic lattice (spacing 1/(m-1)) padded with subcell
    body centers, for the smallest m with enough sites."""
    m = 2
    while m ** 3 + (m - 1) ** 3 < n:
        m += 1
    g = np.linspace(0.0, 1.0, m)
    gx, gy, gz = np.meshgrid(g, g, g, indexing="ij")
    lattice = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    if n <= len(lattice):
        pts = _fps_pick(lattice, n)
    else:
        gc = (g[:-1] + g[1:]) / 2.0
        cx, cy, cz = np.meshgrid(gc, gc, gc, indexing="ij")
        body = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1)
        pts = np.concatenate([lattice, _fps_pick(body, n - len(lattice))])
    pts = pts + rng.normal(scale=1e-3, size=pts.shape)
    return np.clip(pts, 0.0, 1.0)


def _tune_spacing(centers, target_rd, rng, tol):
    """Local nearest-neighbor steps driving the mean NN distance onto
    target_rd; returns (best centers, best error)."""
    c = centers.copy()
    best = c.copy()
    best_err = np.inf
    for it in range(200):
        dists, nn = _nearest_neighbor_distances(c)
        mean = dists.mean()
        err = abs(mean - target_rd)
        if err < best_err:
            best, best_err = c.copy(), err
        if err <= 0.25 * tol:
            break
        step = 0.5 * (target_rd - mean)
        vec = c - c[nn]
        norm = np.linalg.norm(vec, axis=1, keepdims=True)
        # coincident points get a random push direction
        bad = norm[:, 0] < 1e-12
        if np.any(bad):
            r = rng.standard_normal((bad.sum(), 3))
            vec[bad] = r
            norm[bad] = np.linalg.norm(r, axis=1, keepdims=True)
        c = c + step * vec / norm
        # tiny jitter breaks symmetric stalemates
        if it % 50 == 49:
            c = c + rng.standard_normal(c.shape) * 1e-3
        np.clip(c, 0.0, 1.0, out=c)
    return best, best_err


def _relax_centers(centers, target_rd, rng, tol=0.02):
    """Drive the mean nearest-neighbor distance toward target_rd (unit
    cube), Lloyd style.  Local steps from the random start cover most
    targets; spacings near the geometric maximum additionally try a
    near-optimal lattice spread as the start."""
    best, err = _tune_spacing(centers, target_rd, rng, tol)
    if err > 0.25 * tol:
        alt, err2 = _tune_spacing(_max_spread(len(centers), rng),
                                  target_rd, rng, tol)
        if err2 < err:
            return alt
    return best


def _measured_vf(pores, resolution):
    return _voxelize_indicator(pores, resolution).mean()


def _voxelize_indicator(pores, resolution):
    """Pore indicator on the voxel-center grid, float in {0,1}."""
    L = pores.rve_side
    h = L / resolution
    ax = (np.arange(resolution) + 0.5) * h
    flag = np.zeros((resolution,) * 3, dtype=bool)
    rots = _quat_to_rot(pores.quats)
    for c, s, r in zip(pores.centers, pores.semiaxes, rots):
        reach = s.max()
        ilo = np.maximum(((c - reach) / h - 0.5).astype(int), 0)
        ihi = np.minimum(((c + reach) / h + 0.5).astype(int) + 1, resolution)
        if np.any(ilo >= ihi):
            continue
        xs, ys, zs = (ax[ilo[0]:ihi[0]], ax[ilo[1]:ihi[1]], ax[ilo[2]:ihi[2]])
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.stack([gx - c[0], gy - c[1], gz - c[2]], axis=-1)
        local = pts @ r  # world -> body frame (R^T p, batched)
        q = ((local / s) ** 2).sum(axis=-1)
        flag[ilo[0]:ihi[0], ilo[1]:ihi[1], ilo[2]:ihi[2]] |= q <= 1.0
    return flag.astype(np.uint8)


@dataclass(frozen=True)
class Tolerances:
    vf: float = 0.02   # absolute
    rd: float = 0.10   # absolute, in units of L


def reconstruct(desc, seed, tol=None, max_attempts=50, bounds=None):
    """Build a PoreSet realizing the target descriptors.

    Exactly desc.np prolate ellipsoids (semiaxes a, b, b with a/b = ar,
    random orientation).  Semiaxes are scaled uniformly until the
    voxelized volume fraction matches vf, and centers are relaxed until
    the mean nearest-neighbor distance matches rd, both within ``tol``.

    Parameters
    ----------
    desc : RveDescriptors
    seed : int
    tol : Tolerances, optional
    max_attempts : int
        Independent restarts before giving up.

    Returns
    -------
    PoreSet

    Raises
    ------
    ReconstructionError
        If no attempt satisfies the tolerances; carries the best achieved
        descriptors.
    """
    desc.validate(bounds)
    tol = tol or Tolerances()
    rng = np.random.default_rng(seed)
    n = desc.np
    best = None
    best_score = np.inf
    best_meas = None

    for _ in range(max_attempts):
        centers = rng.uniform(0.0, 1.0, size=(n, 3))
        centers = _relax_centers(centers, desc.rd, rng, tol=tol.rd)
        # uniform random rotations from normalized 4-normals
        q = rng.standard_normal((n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        # minor semiaxis from the exact ellipsoid volume at target vf
        b0 = (desc.vf * 3.0 / (4.0 * np.pi * n * desc.ar)) ** (1.0 / 3.0)
        semi = np.tile([desc.ar * b0, b0, b0], (n, 1))
        pores = PoreSet(centers=centers, semiaxes=semi, quats=q)

        # fixed-point scaling of the semiaxes toward the voxelized target;
        # overlap and boundary clipping make the map sublinear, so damp it
        for _ in range(15):
            vf_m = _measured_vf(pores, _CALIBRATION_RESOLUTION)
            if abs(vf_m - desc.vf) <= 0.5 * tol.vf:
                break
            ratio = desc.vf / max(vf_m, 1e-6)
            pores = pores.scaled(np.clip(ratio ** (1.0 / 3.0), 0.6, 1.6))

        mesh = voxelize(pores, _CALIBRATION_RESOLUTION, check_connectivity=False)
        if _matrix_components(mesh)[0] != 1:
            continue
        meas = measure_descriptors(mesh, pores)
        err_vf = abs(meas.vf - desc.vf)
        err_rd = abs(meas.rd - desc.rd)
        score = max(err_vf / tol.vf, err_rd / tol.rd)
        if score < best_score:
            best, best_score, best_meas = pores, score, meas
        if err_vf <= tol.vf and err_rd <= tol.rd:
            return pores

    raise ReconstructionError(
        f"no attempt reached tolerances after {max_attempts} tries "
        f"(best achieved vf={best_meas.vf:.4f}, rd={best_meas.rd:.4f} "
        f"for targets vf={desc.vf:.4f}, rd={desc.rd:.4f})",
        best_achieved=best_meas)


def _matrix_components(mesh):
    """(component count, sizes) of face-connected matrix voxels."""
    matrix = mesh.indicator == 0
    labels, num = ndimage.label(matrix)  # default structure = 6-connectivity
    if num == 0:
        return 0, []
    sizes = np.bincount(labels.ravel())[1:]
    return num, sorted(sizes.tolist(), reverse=True)


def voxelize(pores, resolution, check_connectivity=True):
    """Voxelize a PoreSet: a voxel is pore iff its center lies inside any
    ellipsoid.

    Parameters
    ----------
    pores : PoreSet
    resolution : int
        Voxels per side, >= 8.
    check_connectivity : bool
        Enforce that matrix voxels form one face-connected component.

    Returns
    -------
    VoxelMesh

    Raises
    ------
    ConnectivityError
        If the matrix is disconnected (component sizes in the message).
    """
    if resolution < 8:
        raise ConfigError(f"resolution must be >= 8, got {resolution}")
    ind = _voxelize_indicator(pores, resolution) if len(pores) else \
        np.zeros((resolution,) * 3, dtype=np.uint8)
    mesh = VoxelMesh(resolution=resolution, side_length=pores.rve_side,
                     indicator=ind)
    if check_connectivity:
        num, sizes = _matrix_components(mesh)
        if num != 1:
            raise ConnectivityError(
                f"matrix voxels form {num} components with sizes {sizes}")
    return mesh


def measure_descriptors(mesh, pores):
    """Measure descriptors from a voxelized mesh and its PoreSet.

    vf comes from the voxel count, np from the pore list, ar as the mean
    max/min semiaxis ratio, rd as the mean over pores of the distance to
    the nearest other pore center (fraction of L).
    """
    n = len(pores)
    if n == 0:
        return RveDescriptors(vf=mesh.measured_vf, np=0, ar=1.0, rd=0.0)
    if n < 2:
        raise ConfigError("rd is undefined for fewer than two pores")
    ar = float(np.mean(pores.semiaxes.max(axis=1) / pores.semiaxes.min(axis=1)))
    dists, _ = _nearest_neighbor_distances(pores.centers)
    return RveDescriptors(vf=mesh.measured_vf, np=n, ar=ar,
                          rd=float(dists.mean()) / pores.rve_side)


# ---------------------------------------------------------------------------
# file formats

def save_mesh(mesh, path):
    """Write a VoxelMesh: three ASCII header lines (version, resolution,
    side_length as key=value) followed by resolution^3 raw bytes, 0=matrix
    1=pore, C order over [ix, iy, iz]."""
    header = (f"version={MESH_FORMAT_VERSION}\n"
              f"resolution={mesh.resolution}\n"
              f"side_length={mesh.side_length!r}\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(mesh.indicator, dtype=np.uint8).tobytes())


def load_mesh(path):
    """Read a VoxelMesh written by save_mesh."""
    with open(path, "rb") as f:
        fields = {}
        for _ in range(3):
            key, _, val = f.readline().decode("ascii").strip().partition("=")
            fields[key] = val
        if int(fields.get("version", -1)) != MESH_FORMAT_VERSION:
            raise ConfigError(f"unsupported mesh file version in {path}")
        res = int(fields["resolution"])
        side = float(fields["side_length"])
        data = f.read(res ** 3)
    if len(data) != res ** 3:
        raise ConfigError(f"truncated mesh file {path}")
    ind = np.frombuffer(data, dtype=np.uint8).reshape((res,) * 3).copy()
    return VoxelMesh(resolution=res, side_length=side, indicator=ind)


def save_descriptors(rows, path):
    """Write descriptor rows [(RveDescriptors, seed), ...] as CSV with
    header vf,np,ar,rd,seed."""
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("vf,np,ar,rd,seed\n")
        for desc, seed in rows:
            f.write(f"{desc.vf!r},{desc.np},{desc.ar!r},{desc.rd!r},{seed}\n")


def load_descriptors(path):
    """Read a descriptor CSV -> [(RveDescriptors, seed), ...]."""
    rows = []
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip()
        if header != "vf,np,ar,rd,seed":
            raise ConfigError(f"unexpected descriptor CSV header: {header}")
        for line in f:
            if not line.strip():
                continue
            vf, np_, ar, rd, seed = line.strip().split(",")
            rows.append((RveDescriptors(vf=float(vf), np=int(np_),
                                        ar=float(ar), rd=float(rd)),
                         int(seed)))
    return rows
