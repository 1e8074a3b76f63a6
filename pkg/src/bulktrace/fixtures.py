"""Fixture meshes for the imported-geometry cases.

The wavy-band and ellipsoid-cap domains are transfinite patches bounded by
analytic level sets, so the patch builders here place every boundary node by
root-finding on the bounding field instead of meshing an implicit domain.
Each builder returns (mesh, analytic_phi, interval) ready for a BuiltCase;
``disk_with_hole`` returns just the Mesh used by the validity checks.
"""

import math

import numpy as np
from scipy.optimize import brentq

from .exceptions import ConfigError, GeometryError
from .levelset import (
    ellipsoid_field,
    lobed_ellipse_field,
    polar_wave_field,
    radial_field,
)
from .mesh import BlockBuilder, validate_mesh

TC2_FOCUS = np.array([-10.0, 10.0])
TC4_SPHERE_CENTER = np.array([-1.0, 1.0, 2.0])
TC4_SPHERE_RADIUS = 2.0
TC4_ELL_CENTER = np.array([-0.2, 0.2, 0.1])
TC4_ELL_AXES = np.array([0.9, 0.7, 0.8])


def _tc2_rho(th, c):
    return 2.0 * c + 1.0 + 0.2 * np.sin(8.0 * th)


def _tc2_point(th, c):
    rho = _tc2_rho(th, c)
    return TC2_FOCUS + np.stack([rho * np.cos(th), rho * np.sin(th)], axis=-1)


def tc2_patch(order, n, n_c=None):
    """Wavy band between the levels c=4 and c=7, clipped by the lobed ellipse.

    Single transfinite block in (theta, c): per level the angular window ends
    where the level curve crosses the zero set of the lobed-ellipse field,
    found by Brent's method, so the clamped boundary nodes sit on that zero
    set to roundoff.  Returns (mesh, phi_field, (4.0, 7.0)).
    """
    n = int(n)
    n_c = n if n_c is None else int(n_c)
    if n < 1 or n_c < 1:
        raise ConfigError("tc2_patch needs n >= 1")
    psi = lobed_ellipse_field()
    phi = polar_wave_field(TC2_FOCUS)

    def window(c):
        # one inside-run per level, contained in (-90deg, -28.7deg)
        def g(th):
            return float(psi.value(_tc2_point(np.asarray(th), c)))

        th_in = -math.pi / 3.0
        if g(th_in) >= 0.0:
            raise GeometryError(f"level {c} does not pass through the band interior")
        lo = brentq(g, -math.pi / 2.0 - 0.05, th_in, xtol=1e-15)
        hi = brentq(g, th_in, -0.48, xtol=1e-15)
        return lo, hi

    windows = {}

    def bmap(u):
        # theta decreasing with the first axis keeps det(dX/du) positive
        c = 4.0 + 3.0 * u[:, 1]
        th = np.empty_like(c)
        for cv in np.unique(c):
            if cv not in windows:
                windows[cv] = window(cv)
            lo, hi = windows[cv]
            sel = c == cv
            th[sel] = hi - (hi - lo) * u[sel, 0]
        return _tc2_point(th, c)

    b = BlockBuilder(2, order)
    b.add_block(
        bmap,
        (2 * n, n_c),
        tags={"a0": "outer", "a1": "outer",
              "b0": "levelset_min", "b1": "levelset_max"},
    )
    mesh = b.build()
    validate_mesh(mesh)
    return mesh, phi, (4.0, 7.0)


def _tc4_frame():
    axis = TC4_ELL_CENTER - TC4_SPHERE_CENTER
    axis = axis / np.linalg.norm(axis)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ axis) * axis
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return axis, e1, e2


def _tc4_sphere_point(alpha, beta, c, frame):
    axis, e1, e2 = frame
    omega = np.cos(beta)[..., None] * e1 + np.sin(beta)[..., None] * e2
    rad = TC4_SPHERE_RADIUS + c
    return TC4_SPHERE_CENTER + rad[..., None] * (
        np.cos(alpha)[..., None] * axis + np.sin(alpha)[..., None] * omega
    )


def _tc4_alpha_max(beta, c, frame, psi):
    # bisection on the geodesic angle; the cap rim stays well inside (0.05, 1)
    lo = np.full(np.shape(beta), 0.05)
    hi = np.full(np.shape(beta), 1.0)
    if np.any(psi.value(_tc4_sphere_point(lo, beta, c, frame)) >= 0.0):
        raise GeometryError("cap axis leaves the ellipsoid; bad fixture geometry")
    if np.any(psi.value(_tc4_sphere_point(hi, beta, c, frame)) <= 0.0):
        raise GeometryError("cap rim bracket too small; bad fixture geometry")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        inside = psi.value(_tc4_sphere_point(mid, beta, c, frame)) < 0.0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return 0.5 * (lo + hi)


def tc4_patch(order, n, n_rad=None, n_c=None):
    """Spherical caps r = 2+c about (-1,1,2) clipped by the ellipsoid.

    O-grid in geodesic coordinates around the cap axis, extruded over
    c in [0, 1/2]; the lateral rim is placed on the ellipsoid zero set by
    bisection per (azimuth, level).  Returns (mesh, phi_field, (0.0, 0.5)).
    """
    n = int(n)
    n_rad = n if n_rad is None else int(n_rad)
    n_c = max(1, n) if n_c is None else int(n_c)
    if n < 1 or n_rad < 1 or n_c < 1:
        raise ConfigError("tc4_patch needs n >= 1")
    psi = ellipsoid_field(TC4_ELL_CENTER, TC4_ELL_AXES)
    phi = radial_field(TC4_SPHERE_CENTER, offset=TC4_SPHERE_RADIUS)
    frame = _tc4_frame()

    beta_probe = np.linspace(0.0, 2.0 * math.pi, 181)
    c_probe = np.linspace(0.0, 0.5, 11)
    amin = min(
        float(_tc4_alpha_max(beta_probe, np.full_like(beta_probe, cv), frame, psi).min())
        for cv in c_probe
    )
    w = 0.45 * amin

    def physical(xy, c):
        alpha = np.linalg.norm(xy, axis=-1)
        axis, e1, e2 = frame
        rad = TC4_SPHERE_RADIUS + c
        # sinc keeps the chart map smooth through the cap axis alpha = 0
        planar = xy[..., 0, None] * e1 + xy[..., 1, None] * e2
        return TC4_SPHERE_CENTER + rad[..., None] * (
            np.cos(alpha)[..., None] * axis + np.sinc(alpha / math.pi)[..., None] * planar
        )

    def center_map(u):
        xy = w * (2.0 * u[:, :2] - 1.0)
        return physical(xy, 0.5 * u[:, 2])

    b = BlockBuilder(3, order)
    cap_tags = {"c0": "levelset_cap", "c1": "levelset_cap"}
    b.add_block(center_map, (n, n, n_c), tags=dict(cap_tags))
    for sector in range(4):
        rot = sector * math.pi / 2.0

        def sector_map(u, rot=rot):
            t, s = u[:, 0], 2.0 * u[:, 1] - 1.0
            c = 0.5 * u[:, 2]
            ca, sa = math.cos(rot), math.sin(rot)
            ix = ca * w - sa * (w * s)
            iy = sa * w + ca * (w * s)
            beta = rot + s * math.pi / 4.0
            am = _tc4_alpha_max(beta, c, frame, psi)
            bx = am * np.cos(beta)
            by = am * np.sin(beta)
            xy = np.stack([(1.0 - t) * ix + t * bx, (1.0 - t) * iy + t * by], axis=1)
            return physical(xy, c)

        tags = {"a1": "lateral"}
        tags.update(cap_tags)
        b.add_block(sector_map, (n_rad, n, n_c), tags=tags)
    mesh = b.build()
    validate_mesh(mesh)
    return mesh, phi, (0.0, 0.5)


def disk_with_hole(order, n, center=(0.0, 0.0), radius=0.28,
                   hole_center=None, hole_radius=0.06):
    """Disk with an off-center circular hole; rays from the hole center.

    The hole splits a band of level sets of the standard disk field into two
    boundary-crossing arcs, which is exactly the topology the validity
    checker must flag.  Returns the Mesh (tags "hole" and "outer").
    """
    n = int(n)
    if n < 1:
        raise ConfigError("disk_with_hole needs n >= 1")
    C = np.asarray(center, dtype=float)
    if hole_center is None:
        ang = math.radians(115.0)
        H = C + 0.12 * np.array([math.cos(ang), math.sin(ang)])
    else:
        H = np.asarray(hole_center, dtype=float)
    if np.linalg.norm(H - C) + hole_radius >= radius:
        raise GeometryError("hole reaches the outer boundary")

    def bmap(u):
        # clockwise angular sweep keeps det(dX/du) positive with b radial-out
        th = -2.0 * math.pi * u[:, 0]
        e = np.stack([np.cos(th), np.sin(th)], axis=1)
        he = (H - C) @ e.T
        L = -he + np.sqrt(he * he + radius * radius - (H - C) @ (H - C))
        r = (1.0 - u[:, 1]) * hole_radius + u[:, 1] * L
        return H + r[:, None] * e

    def snap_circle(X, center, r):
        v = X - center
        return center + r * v / np.linalg.norm(v, axis=1, keepdims=True)

    b = BlockBuilder(2, order)
    b.add_block(
        bmap,
        (8 * n, n),
        tags={"b0": "hole", "b1": "outer"},
        snaps={"b0": lambda X: snap_circle(X, H, hole_radius),
               "b1": lambda X: snap_circle(X, C, radius)},
    )
    mesh = b.build()
    validate_mesh(mesh)
    return mesh


FIXTURE_CATALOG = {
    "tc2_patch": lambda cfg: tc2_patch(**cfg)[0],
    "tc4_patch": lambda cfg: tc4_patch(**cfg)[0],
    "disk_with_hole": lambda cfg: disk_with_hole(**cfg),
}


def fixture_mesh(name, params=None):
    """Build a fixture mesh by name; used by the mesh export command."""
    if name not in FIXTURE_CATALOG:
        raise ConfigError(f"unknown fixture {name!r}; known: {sorted(FIXTURE_CATALOG)}")
    try:
        return FIXTURE_CATALOG[name](dict(params or {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for fixture {name!r}: {exc}") from exc
