"""Finite-strain kinematics and St. Venant-Kirchhoff stresses on level sets.

All functions are batched: tensor arguments have shape (..., d, d) and scalar
results drop the trailing axes.  The in-plane deformation gradient
F_surf = I + grad_u P maps the normal N onto itself, so it is always
invertible and the spatial (Almansi) strain needs no special casing.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ElementInversionError
from .levelset import projector


@dataclass(frozen=True)
class MaterialParams:
    """Elastic parameters of the structures carried by the level sets.

    kind "rope" (1D structures in 2D bulk): lam = 0, mu = E/2, nu ignored.
    kind "membrane" (2D structures in 3D bulk): plane-stress constants
    lam = E*nu/(1-nu^2), mu = E/(2(1+nu)).
    """

    E: float
    nu: float = 0.0
    kind: str = "membrane"

    def __post_init__(self):
        if self.kind not in ("rope", "membrane"):
            raise ConfigError(f"unknown material kind {self.kind!r}")
        if self.E <= 0.0:
            raise ConfigError("Young's modulus must be positive")
        if self.kind == "membrane" and not (-1.0 < self.nu < 0.5):
            raise ConfigError(f"Poisson ratio {self.nu} outside (-1, 0.5)")

    @property
    def lam(self):
        if self.kind == "rope":
            return 0.0
        return self.E * self.nu / (1.0 - self.nu * self.nu)

    @property
    def mu(self):
        if self.kind == "rope":
            return 0.5 * self.E
        return 0.5 * self.E / (1.0 + self.nu)


class KinematicState:
    """Deformation measures at points on (all) level sets.

    Built from the bulk displacement gradient and the field gradient; holds
    material quantities (N, P, F_surf, E_dir, E_tang) eagerly.  The spatial
    quantities (n, p, stretch, Almansi strains) involve det F_bulk and are
    computed on first access: the weak form never needs them, and transient
    Newton iterates may pass through locally inverted bulk states that the
    in-plane response does not feel.  Accessing a spatial quantity of an
    inverted state raises ElementInversionError.
    """

    __slots__ = (
        "grad_u", "gnorm", "grad_phi", "N", "P", "F_bulk", "F_surf",
        "E_dir", "E_tang",
        "_detF", "_nstar", "_stretch", "_n", "_p", "_e_dir", "_e_tang",
    )

    def __init__(self):
        self._detF = None
        self._nstar = None
        self._stretch = None
        self._n = None
        self._p = None
        self._e_dir = None
        self._e_tang = None

    @property
    def detF(self):
        if self._detF is None:
            self._detF = np.linalg.det(self.F_bulk)
        return self._detF

    def require_orientation(self):
        detF = self.detF
        if np.any(detF <= 0.0):
            raise ElementInversionError(
                "deformation gradient not orientation-preserving "
                f"(min det {detF.min():.3e})"
            )

    def _spatial_normal(self):
        # Nanson through F_surf: cof(F_bulk) N = cof(F_surf) N because the
        # two gradients agree on tangent vectors, so the stretch and the
        # deformed normal never see the across-level part of u.  The
        # cofactor columns are built directly (cross products in 3D), which
        # stays finite even where interleaving level sets drive det F_bulk
        # through zero.
        if self._nstar is None:
            F = self.F_surf
            d = F.shape[-1]
            if d == 2:
                cofN = np.empty_like(self.N)
                cofN[..., 0] = F[..., 1, 1] * self.N[..., 0] \
                    - F[..., 1, 0] * self.N[..., 1]
                cofN[..., 1] = F[..., 0, 0] * self.N[..., 1] \
                    - F[..., 0, 1] * self.N[..., 0]
            else:
                c0, c1, c2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
                cofN = (self.N[..., 0, None] * np.cross(c1, c2)
                        + self.N[..., 1, None] * np.cross(c2, c0)
                        + self.N[..., 2, None] * np.cross(c0, c1))
            lam = np.linalg.norm(cofN, axis=-1)
            if np.any(lam <= 0.0):
                raise ElementInversionError(
                    "level-set differential element degenerates (stretch 0)"
                )
            self._nstar = cofN
        return self._nstar

    @property
    def stretch(self):
        if self._stretch is None:
            nstar = self._spatial_normal()
            self._stretch = np.linalg.norm(nstar, axis=-1)
        return self._stretch

    @property
    def n(self):
        if self._n is None:
            nstar = self._spatial_normal()
            self._n = nstar / np.linalg.norm(nstar, axis=-1)[..., None]
        return self._n

    @property
    def p(self):
        if self._p is None:
            self._p = projector(self.n)
        return self._p

    @property
    def e_dir(self):
        if self._e_dir is None:
            # F_surf N = N, so b_surf = F_surf F_surf^T stays invertible
            eye = np.eye(self.F_surf.shape[-1])
            b = self.F_surf @ np.swapaxes(self.F_surf, -1, -2)
            self._e_dir = 0.5 * (eye - np.linalg.inv(b))
        return self._e_dir

    @property
    def e_tang(self):
        if self._e_tang is None:
            self._e_tang = self.p @ self.e_dir @ self.p
        return self._e_tang


def kinematics(grad_u, grad_phi, check=True):
    """Build the KinematicState from batched grad_u (...,d,d), grad_phi (...,d).

    check=True enforces det F_bulk > 0 up front.  The solver assembles with
    check=False because the in-plane residual and tangent are independent of
    the across-level drift; every quantity that does need the orientation
    still verifies it at access time.
    """
    grad_u = np.asarray(grad_u, dtype=float)
    grad_phi = np.asarray(grad_phi, dtype=float)
    d = grad_u.shape[-1]
    st = KinematicState()
    st.grad_u = grad_u
    st.grad_phi = grad_phi
    gn = np.linalg.norm(grad_phi, axis=-1)
    if np.any(gn <= 0.0):
        raise ConfigError("vanishing field gradient in kinematics")
    st.gnorm = gn
    st.N = grad_phi / gn[..., None]
    st.P = projector(st.N)
    eye = np.eye(d)
    st.F_bulk = eye + grad_u
    st.F_surf = eye + grad_u @ st.P
    if check:
        st.require_orientation()
    st.E_dir = 0.5 * (np.swapaxes(st.F_surf, -1, -2) @ st.F_surf - eye)
    st.E_tang = st.P @ st.E_dir @ st.P
    return st


def pk2(state, mat):
    """Second Piola-Kirchhoff stress S = lam tr(E_tang) P + 2 mu E_tang."""
    tr = np.trace(state.E_tang, axis1=-2, axis2=-1)
    return mat.lam * tr[..., None, None] * state.P + 2.0 * mat.mu * state.E_tang


def pk2_from_directional(state, mat):
    """Same stress assembled from the directional strain, P(...)P projected."""
    tr_dir = np.trace(state.P @ state.E_dir @ state.P, axis1=-2, axis2=-1)
    core = mat.lam * tr_dir[..., None, None] * np.eye(state.P.shape[-1]) \
        + 2.0 * mat.mu * state.E_dir
    return state.P @ core @ state.P


def pk1(state, S):
    """Two-point stress K = F_surf S (rows spatial, columns material)."""
    return state.F_surf @ S


def cauchy(state, S):
    """Cauchy stress sigma = F_surf S F_surf^T / stretch."""
    return state.F_surf @ S @ np.swapaxes(state.F_surf, -1, -2) \
        / state.stretch[..., None, None]


def von_mises(sigma, kind):
    """In-plane von Mises stress of a level-set Cauchy stress.

    The normal direction carries no stress, so the in-plane principal values
    are the nonzero eigenvalues: ropes give |s1|, membranes
    sqrt(s1^2 - s1 s2 + s2^2).
    """
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[-1]
    ev = np.linalg.eigvalsh(sigma)
    idx = np.argsort(np.abs(ev), axis=-1)
    ev_sorted = np.take_along_axis(ev, idx, axis=-1)
    if kind == "rope":
        if d != 2:
            raise ConfigError("rope stresses live in 2D")
        return np.abs(ev_sorted[..., -1])
    if kind == "membrane":
        if d != 3:
            raise ConfigError("membrane stresses live in 3D")
        s1 = ev_sorted[..., -1]
        s2 = ev_sorted[..., -2]
        return np.sqrt(s1 * s1 - s1 * s2 + s2 * s2)
    raise ConfigError(f"unknown material kind {kind!r}")


def pk2_linearization(state, mat, dgrad_u):
    """Directional derivative of (S, K) along a displacement-gradient increment.

    Returns (dS, dK) for dF_surf = dgrad_u P, with
    dE_dir = sym(F_surf^T dF_surf), dS = P(lam tr(dE_dir) I + 2 mu dE_dir)P,
    dK = dF_surf S + F_surf dS.
    """
    dgrad_u = np.asarray(dgrad_u, dtype=float)
    d = dgrad_u.shape[-1]
    dF = dgrad_u @ state.P
    FtdF = np.swapaxes(state.F_surf, -1, -2) @ dF
    dE = 0.5 * (FtdF + np.swapaxes(FtdF, -1, -2))
    tr = np.trace(dE, axis1=-2, axis2=-1)
    core = mat.lam * tr[..., None, None] * np.eye(d) + 2.0 * mat.mu * dE
    dS = state.P @ core @ state.P
    S = pk2(state, mat)
    dK = dF @ S + state.F_surf @ dS
    return dS, dK


def stored_energy_density(state, mat):
    """Strain energy per undeformed level-set area, 0.5 E_tang : S."""
    S = pk2(state, mat)
    return 0.5 * np.einsum("...ij,...ij->...", state.E_tang, S)


def spatial_energy_density(state, mat):
    """The same energy written spatially, 0.5 e_tang : sigma * stretch."""
    S = pk2(state, mat)
    sig = cauchy(state, S)
    return 0.5 * np.einsum("...ij,...ij->...", state.e_tang, sig) * state.stretch
