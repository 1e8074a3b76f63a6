"""Scalar driver fields, their mesh interpolants, and domain admissibility.

The driving field phi is given analytically (value/gradient/Hessian) and is
carried through assembly as its nodal interpolant, so all computed normals,
projectors and curvatures are those of the discrete field.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .exceptions import ConfigError, DomainValidityError, GeometryError
from .mesh import facet_frames, locate_point
from .refelem import make_quadrature


class ScalarField:
    """Analytic scalar field with vectorized value, gradient and Hessian."""

    def __init__(self, value, grad, hess, name="field"):
        self._value = value
        self._grad = grad
        self._hess = hess
        self.name = name

    def value(self, X):
        return self._value(np.asarray(X, dtype=float))

    def grad(self, X):
        return self._grad(np.asarray(X, dtype=float))

    def hess(self, X):
        return self._hess(np.asarray(X, dtype=float))


def radial_field(center, offset=0.0, name="radial"):
    """phi = ||X - center|| - offset."""
    c = np.asarray(center, dtype=float)

    def val(X):
        return np.linalg.norm(X - c, axis=-1) - offset

    def grad(X):
        v = X - c
        r = np.linalg.norm(v, axis=-1, keepdims=True)
        return v / r

    def hess(X):
        v = X - c
        r = np.linalg.norm(v, axis=-1, keepdims=True)
        n = v / r
        d = X.shape[-1]
        eye = np.eye(d)
        return (eye - n[..., :, None] * n[..., None, :]) / r[..., None]

    return ScalarField(val, grad, hess, name)


def coordinate_field(axis, dim, offset=0.0, name="coordinate"):
    """phi = X[axis] - offset."""
    axis = int(axis)
    if not 0 <= axis < dim:
        raise ConfigError(f"axis {axis} out of range for dim {dim}")

    def val(X):
        return X[..., axis] - offset

    def grad(X):
        g = np.zeros_like(X)
        g[..., axis] = 1.0
        return g

    def hess(X):
        return np.zeros(X.shape + (X.shape[-1],))

    return ScalarField(val, grad, hess, name)


def quadratic_radial_field(center, coeff=1.0, name="quadratic_radial"):
    """phi = coeff * ||X - center||^2; has a critical point at the center."""
    c = np.asarray(center, dtype=float)

    def val(X):
        return coeff * np.sum((X - c) ** 2, axis=-1)

    def grad(X):
        return 2.0 * coeff * (X - c)

    def hess(X):
        d = X.shape[-1]
        out = np.zeros(X.shape + (d,))
        out[...] = 2.0 * coeff * np.eye(d)
        return out

    return ScalarField(val, grad, hess, name)


def polar_wave_field(center, radial_coeff=0.5, wave_amp=-0.1, wave_freq=8, offset=-0.5,
                     name="polar_wave"):
    """phi = radial_coeff*r + wave_amp*sin(freq*theta) + offset in polar
    coordinates (r, theta) around `center`; 2D only."""
    c = np.asarray(center, dtype=float)
    if c.shape != (2,):
        raise ConfigError("polar_wave_field is 2D")
    k = float(wave_freq)

    def polar(X):
        v = X - c
        r = np.linalg.norm(v, axis=-1)
        th = np.arctan2(v[..., 1], v[..., 0])
        return v, r, th

    def val(X):
        _, r, th = polar(X)
        return radial_coeff * r + wave_amp * np.sin(k * th) + offset

    def grad(X):
        v, r, th = polar(X)
        er = v / r[..., None]
        et = np.stack([-er[..., 1], er[..., 0]], axis=-1)
        ft = wave_amp * k * np.cos(k * th)  # d phi / d theta
        return radial_coeff * er + (ft / r)[..., None] * et

    def hess(X):
        v, r, th = polar(X)
        er = v / r[..., None]
        et = np.stack([-er[..., 1], er[..., 0]], axis=-1)
        ft = wave_amp * k * np.cos(k * th)
        ftt = -wave_amp * k * k * np.sin(k * th)
        ee_r = er[..., :, None] * er[..., None, :]
        ee_t = et[..., :, None] * et[..., None, :]
        ee_rt = er[..., :, None] * et[..., None, :] + et[..., :, None] * er[..., None, :]
        h_rr = np.zeros_like(r)
        h_rt = -ft / r**2
        h_tt = ftt / r**2 + radial_coeff / r
        return (
            h_rr[..., None, None] * ee_r
            + h_rt[..., None, None] * ee_rt
            + h_tt[..., None, None] * ee_t
        )

    return ScalarField(val, grad, hess, name)


def ellipsoid_field(center, semi_axes, name="ellipsoid"):
    """phi = sum(((X_i - c_i)/a_i)^2) - 1."""
    c = np.asarray(center, dtype=float)
    a = np.asarray(semi_axes, dtype=float)

    def val(X):
        return np.sum(((X - c) / a) ** 2, axis=-1) - 1.0

    def grad(X):
        return 2.0 * (X - c) / a**2

    def hess(X):
        d = X.shape[-1]
        out = np.zeros(X.shape + (d,))
        out[...] = np.diag(2.0 / a**2)
        return out

    return ScalarField(val, grad, hess, name)


def lobed_ellipse_field(name="lobed_ellipse"):
    """Ellipse indicator plus a smooth bell bump; zero level bounds a 2D blob.

    psi = (X/10)^2 + (Y/6.5)^2 - 1 + bell(||X - (4,5)||), where the bell is
    (4 a (1-a))^5 with a = (r+12)/24 for r <= 12 and zero beyond.
    """
    RX, RY, RB = 10.0, 6.5, 12.0
    XB = np.array([4.0, 5.0])

    def parts(X):
        v = X - XB
        r = np.linalg.norm(v, axis=-1)
        # with a = (r+RB)/(2 RB) the bump is (4a(1-a))^5, and
        # 4a(1-a) = (RB^2 - r^2)/RB^2
        b = np.clip((RB * RB - r * r) / (RB * RB), 0.0, None)
        return v, r, b

    def val(X):
        v, r, b = parts(X)
        e = (X[..., 0] / RX) ** 2 + (X[..., 1] / RY) ** 2 - 1.0
        return e + b**5

    def grad(X):
        v, r, b = parts(X)
        g = np.stack([2.0 * X[..., 0] / RX**2, 2.0 * X[..., 1] / RY**2], axis=-1)
        # d(b^5)/dX = 5 b^4 * (-2 v / RB^2)
        gb = (-10.0 * b**4 / RB**2)[..., None] * v
        return g + gb

    def hess(X):
        v, r, b = parts(X)
        out = np.zeros(X.shape + (2,))
        out[...] = np.diag([2.0 / RX**2, 2.0 / RY**2])
        # d2(b^5) = -10/RB^2 [ b^4 I + 4 b^3 v ox db ], db = -2v/RB^2
        bb = (-10.0 * b**4 / RB**2)[..., None, None] * np.eye(2)
        bv = (80.0 * b**3 / RB**4)[..., None, None] * (
            v[..., :, None] * v[..., None, :]
        )
        inside = (b > 0.0)[..., None, None]
        return out + np.where(inside, bb + bv, 0.0)

    return ScalarField(val, grad, hess, name)


FIELD_CATALOG = {
    "radial": radial_field,
    "coordinate": coordinate_field,
    "quadratic_radial": quadratic_radial_field,
    "polar_wave": polar_wave_field,
    "ellipsoid": ellipsoid_field,
    "lobed_ellipse": lobed_ellipse_field,
}


def field_from_config(cfg, dim):
    """Build a ScalarField from {"name": ..., "params": {...}}."""
    if not isinstance(cfg, dict) or "name" not in cfg:
        raise ConfigError("field config must be a dict with a 'name'")
    name = cfg["name"]
    params = dict(cfg.get("params", {}))
    extra = set(cfg) - {"name", "params"}
    if extra:
        raise ConfigError(f"unknown field config keys {sorted(extra)}")
    if name not in FIELD_CATALOG:
        raise ConfigError(f"unknown field {name!r}; known: {sorted(FIELD_CATALOG)}")
    if name == "coordinate":
        params.setdefault("dim", dim)
    try:
        return FIELD_CATALOG[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for field {name!r}: {exc}") from exc


class LevelSetField:
    """Nodal interpolant of the driver field on a mesh, plus the level range."""

    def __init__(self, mesh, analytic=None, nodal=None, interval=None):
        self.mesh = mesh
        self.analytic = analytic
        if nodal is None:
            if analytic is None:
                raise ConfigError("need an analytic field or nodal values")
            nodal = analytic.value(mesh.coords)
        self.nodal = np.asarray(nodal, dtype=float)
        if self.nodal.shape != (mesh.n_nodes,):
            raise ConfigError("nodal level-set values must be one per mesh node")
        self.interval = None if interval is None else (float(interval[0]), float(interval[1]))
        if self.interval is not None and not self.interval[0] < self.interval[1]:
            raise ConfigError("level interval must be increasing")

    def range(self):
        if self.interval is not None:
            return self.interval
        return float(self.nodal.min()), float(self.nodal.max())

    def grad_at(self, X):
        """Interpolant gradient at physical points (m, dim)."""
        pts = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty_like(pts)
        for i, P in enumerate(pts):
            e, r = locate_point(self.mesh, P)
            _, G, _ = self.mesh.elem.tabulate(r[None, :])
            Xe = self.mesh.coords[self.mesh.conn[e]]
            J = Xe.T @ G[0]
            gref = self.nodal[self.mesh.conn[e]] @ G[0]
            out[i] = np.linalg.solve(J.T, gref)
        return out


def normal(field, X, use_interpolant=False):
    """Unit normal of the field's level sets at points X.

    field is a ScalarField, or a LevelSetField when use_interpolant is set.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if use_interpolant:
        if not isinstance(field, LevelSetField):
            raise ConfigError("interpolant normals need a LevelSetField")
        g = field.grad_at(X)
    else:
        analytic = field.analytic if isinstance(field, LevelSetField) else field
        if analytic is None:
            raise ConfigError("field has no analytic form; use use_interpolant=True")
        g = analytic.grad(X)
    nrm = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(nrm < 1e-14):
        raise DomainValidityError("vanishing gradient; normal undefined")
    return g / nrm


def projector(N):
    """In-plane projector P = I - N ox N for unit normals N (..., d)."""
    N = np.asarray(N, dtype=float)
    d = N.shape[-1]
    return np.eye(d) - N[..., :, None] * N[..., None, :]


def conormal_2d(N):
    """Conormal by +90 degree rotation: N=[0,1] -> Q=[-1,0]."""
    N = np.asarray(N, dtype=float)
    if N.shape[-1] != 2:
        raise ConfigError("conormal_2d needs 2D normals")
    return np.stack([-N[..., 1], N[..., 0]], axis=-1)


def conormal_3d(N, M):
    """Unit conormal N x (M x N); undefined when N and M are parallel."""
    N = np.asarray(N, dtype=float)
    M = np.asarray(M, dtype=float)
    if N.shape[-1] != 3:
        raise ConfigError("conormal_3d needs 3D vectors")
    cr = np.cross(M, N)
    if np.any(np.linalg.norm(cr, axis=-1) <= 1e-8):
        raise GeometryError("conormal undefined: normal and boundary normal are parallel")
    q = np.cross(N, cr)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# admissibility


@dataclass
class ValidityReport:
    flags: dict
    details: dict = dc_field(default_factory=dict)

    @property
    def valid(self):
        return not any(self.flags.values())

    def __str__(self):
        lines = []
        for key in ("interior_extremum", "tangential_contact", "boundary_crossing"):
            state = "FLAG" if self.flags[key] else "ok"
            line = f"{key}: {state}"
            if key in self.details and self.flags[key]:
                line += f"  ({self.details[key]})"
            lines.append(line)
        lines.append("valid" if self.valid else "invalid")
        return "\n".join(lines)


def _default_excluded(mesh, excluded_tags):
    if excluded_tags is None:
        return {t for t in mesh.boundary_tags if t.startswith("levelset")}
    return set(excluded_tags)


def _boundary_node_ids(mesh):
    ids = set()
    for e, f, _ in mesh.boundary:
        ids.update(int(i) for i in mesh.conn[e][mesh.elem.facets[f].node_ids])
    return np.array(sorted(ids), dtype=np.int64)


def _boundary_loops_2d(mesh):
    """Ordered closed loops of boundary facets, as lists of (el, facet)."""
    ends = {}
    items = []
    for k, (e, f, _) in enumerate(mesh.boundary):
        nid = mesh.conn[e][mesh.elem.facets[f].node_ids]
        a, b = int(nid[0]), int(nid[-1])
        items.append((e, f, a, b))
        ends.setdefault(a, []).append(k)
        ends.setdefault(b, []).append(k)
    unused = set(range(len(items)))
    loops = []
    while unused:
        k = min(unused)
        unused.discard(k)
        e, f, a, b = items[k]
        loop = [(e, f, a, b)]
        node = b
        while node != loop[0][2]:
            nxt = None
            for k2 in ends.get(node, []):
                if k2 in unused:
                    nxt = k2
                    break
            if nxt is None:
                raise GeometryError("boundary facets do not close into loops")
            unused.discard(nxt)
            e2, f2, a2, b2 = items[nxt]
            if a2 != node:
                a2, b2 = b2, a2
            loop.append((items[nxt][0], items[nxt][1], a2, b2))
            node = b2
        loops.append(loop)
    return loops


def validate_levelset_domain(mesh, field, excluded_tags=None, n_levels=101,
                             g_min=1e-10, contact_tol=1e-6, interval=None):
    """Check the admissibility of the driver field on the bulk mesh.

    Flags raised in the report:
      interior_extremum: an extremum of the interpolant lies strictly inside
        the domain, or its gradient vanishes at a quadrature point;
      tangential_contact: level sets touch a non-excluded boundary part
        tangentially;
      boundary_crossing: some sampled level exists in the bulk but never
        crosses the domain boundary (a closed level set).
    """
    if isinstance(field, LevelSetField):
        lsf = field
    else:
        lsf = LevelSetField(mesh, analytic=field, interval=interval)
    phi = lsf.nodal
    excluded = _default_excluded(mesh, excluded_tags)
    flags = {}
    details = {}

    # (a) extrema must sit on the boundary, gradient must not vanish
    bnode = _boundary_node_ids(mesh)
    inner = np.setdiff1d(np.arange(mesh.n_nodes), bnode)
    span = float(phi.max() - phi.min())
    margin = 1e-12 * max(span, 1.0)
    ext = False
    if inner.size and bnode.size:
        if phi[inner].max() > phi[bnode].max() + margin:
            ext = True
            details["interior_extremum"] = (
                f"interior max {phi[inner].max():.6g} exceeds boundary max "
                f"{phi[bnode].max():.6g}"
            )
        if phi[inner].min() < phi[bnode].min() - margin:
            ext = True
            details.setdefault(
                "interior_extremum",
                f"interior min {phi[inner].min():.6g} below boundary min "
                f"{phi[bnode].min():.6g}",
            )
    quad = make_quadrature(mesh.elem)
    _, G, _ = mesh.elem.tabulate(quad.points)
    Xe = mesh.coords[mesh.conn]
    J = np.einsum("cnd,qni->cqdi", Xe, G)
    JinvT = np.swapaxes(np.linalg.inv(J), -1, -2)
    gref = np.einsum("cn,qni->cqi", phi[mesh.conn], G)
    gphi = np.einsum("cqdi,cqi->cqd", JinvT, gref)
    gnorm = np.linalg.norm(gphi, axis=-1)
    if gnorm.min() < g_min:
        ext = True
        details["interior_extremum"] = (
            f"interpolant gradient {gnorm.min():.3e} below floor {g_min:.1e}"
        )
    flags["interior_extremum"] = ext

    # (b) tangential contact on non-excluded boundary parts
    contact = False
    check_tags = [t for t in mesh.boundary_tags if t not in excluded]
    if check_tags:
        for fr in facet_frames(mesh, check_tags):
            V, G, _ = mesh.elem.tabulate(fr.points_ref)
            Xe = mesh.coords[mesh.conn[fr.element]]
            Jf = np.einsum("nd,qni->qdi", Xe, G)
            JfinvT = np.swapaxes(np.linalg.inv(Jf), -1, -2)
            gq = np.einsum("qdi,qi->qd", JfinvT, phi[mesh.conn[fr.element]] @ G)
            Nq = gq / np.linalg.norm(gq, axis=-1, keepdims=True)
            if mesh.dim == 2:
                s = np.abs(Nq[:, 0] * fr.normals[:, 1] - Nq[:, 1] * fr.normals[:, 0])
            else:
                s = np.linalg.norm(np.cross(Nq, fr.normals), axis=-1)
            if s.min() < contact_tol:
                contact = True
                details["tangential_contact"] = (
                    f"|N x M| = {s.min():.3e} on boundary part {fr.tag!r}"
                )
                break
    flags["tangential_contact"] = contact

    # (c) every existing level must cross the boundary
    lo, hi = lsf.range() if interval is None else (float(interval[0]), float(interval[1]))
    cs = lo + (np.arange(n_levels) + 0.5) / n_levels * (hi - lo)
    el_min = phi[mesh.conn].min(axis=1)
    el_max = phi[mesh.conn].max(axis=1)
    missing = []
    if mesh.dim == 2:
        loops = _boundary_loops_2d(mesh)
        samples = []
        for loop in loops:
            vals = []
            for e, f, a, b in loop:
                nid = mesh.conn[e][mesh.elem.facets[f].node_ids]
                seq = phi[nid]
                if int(nid[0]) != a:
                    seq = seq[::-1]
                vals.extend(seq[:-1])
            samples.append(np.array(vals))
        for c in cs:
            if not np.any((el_min <= c) & (el_max >= c)):
                continue
            crossed = False
            for vals in samples:
                sgn = np.sign(vals - c)
                sgn = sgn[sgn != 0.0]
                if sgn.size and np.any(sgn != np.roll(sgn, 1)):
                    crossed = True
                    break
            if not crossed:
                missing.append(float(c))
    else:
        fvals = []
        for e, f, _ in mesh.boundary:
            nid = mesh.conn[e][mesh.elem.facets[f].node_ids]
            fvals.append((phi[nid].min(), phi[nid].max()))
        fvals = np.array(fvals) if fvals else np.zeros((0, 2))
        for c in cs:
            if not np.any((el_min <= c) & (el_max >= c)):
                continue
            if not np.any((fvals[:, 0] <= c) & (fvals[:, 1] >= c)):
                missing.append(float(c))
    flags["boundary_crossing"] = bool(missing)
    if missing:
        details["boundary_crossing"] = (
            f"{len(missing)} sampled levels never cross the boundary, "
            f"first at c = {missing[0]:.6g}"
        )
    return ValidityReport(flags, details)
