"""Voigt notation helpers.

Convention used repo-wide: component order (11, 22, 33, 12, 13, 23).
Strain vectors use engineering shear components (gamma_ij = 2 eps_ij);
stress vectors carry plain tensor components.  With this pairing,
sigma . eps gives twice the strain energy density and stiffness
matrices act on engineering-strain vectors.
"""

import numpy as np

# (i, j) index pairs for the six Voigt slots
PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))

# second-order identity, stress layout
ID6 = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])

# 1 (x) 1 on the normal block
JJ = np.zeros((6, 6))
JJ[:3, :3] = 1.0

# symmetric fourth-order identity acting on engineering-strain vectors
IV = np.diag([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])

# deviatoric projector (stress = PV . eng_strain gives 2 mu-free deviator)
PV = IV - JJ / 3.0

# weights turning a stress-layout vector into the tensor Frobenius metric
FROB_W = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


def tensor_to_stress(t):
    """Symmetric 3x3 tensor -> length-6 stress-layout vector."""
    t = np.asarray(t)
    return np.array([t[0, 0], t[1, 1], t[2, 2], t[0, 1], t[0, 2], t[1, 2]])

def stress_to_tensor(v):
    """Length-6 stress-layout vector -> symmetric 3x3 tensor."""
    v = np.asarray(v)
    return np.array([[v[0], v[3], v[4]],
                     [v[3], v[1], v[5]],
                     [v[4], v[5], v[2]]])

def tensor_to_strain(t):
    """Symmetric 3x3 strain tensor -> engineering-strain vector."""
    t = np.asarray(t)
    return np.array([t[0, 0], t[1, 1], t[2, 2],
                     2.0 * t[0, 1], 2.0 * t[0, 2], 2.0 * t[1, 2]])

def strain_to_tensor(v):
    """Engineering-strain vector -> symmetric 3x3 tensor."""
    v = np.asarray(v)
    return np.array([[v[0], 0.5 * v[3], 0.5 * v[4]],
                     [0.5 * v[3], v[1], 0.5 * v[5]],
                     [0.5 * v[4], 0.5 * v[5], v[2]]])

def trace(stress):
    """Trace of stress-layout vectors; works on (..., 6) arrays."""
    s = np.asarray(stress)
    return s[..., 0] + s[..., 1] + s[..., 2]

def deviator(stress):
    """Deviatoric part of stress-layout vectors; (..., 6) arrays."""
    s = np.asarray(stress, dtype=float).copy()
    m = trace(s) / 3.0
    s[..., :3] -= m[..., None]
    return s

def frob_norm(stress):
    """Tensor Frobenius norm of stress-layout vectors; (..., 6) arrays."""
    s = np.asarray(stress)
    return np.sqrt(np.einsum('...i,i,...i->...', s, FROB_W, s))

def mises(stress):
    """Von Mises equivalent stress of stress-layout vectors."""
    return np.sqrt(1.5) * frob_norm(deviator(stress))

def double_contract(a, b):
    """Tensor double contraction a:b of two stress-layout vectors."""
    a = np.asarray(a)
    b = np.asarray(b)
    return np.einsum('...i,i,...i->...', a, FROB_W, b)
