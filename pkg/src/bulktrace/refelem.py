"""Reference elements: equally spaced Lagrange bases and quadrature rules.

Shapes: "line" on [-1,1], "quad" on [-1,1]^2, "hex" on [-1,1]^3 and "tri" on
the unit triangle (0,0)-(1,0)-(0,1).  Orders 1..6.  Every basis function is
stored as a product of affine factors, so values, gradients and Hessians come
out of one product-rule sweep and stay exact at the nodes for any order.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from .exceptions import ConfigError, GeometryError

MAX_ORDER = 6
_DOMAIN_TOL = 1e-12


@dataclass
class QuadratureRule:
    """Points (n_qp, dim) and weights (n_qp,) on the reference domain."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self):
        return self.points.shape[0]


@dataclass
class Facet:
    """One boundary facet of a reference element.

    The facet is the affine image r(t) = origin + axes @ t of the facet
    reference domain ([-1,1] for edges, [-1,1]^2 for faces).  normal is the
    constant outward reference normal (unit length), node_ids are the
    element-local node indices lying on the facet, ordered by t.
    """

    origin: np.ndarray
    axes: np.ndarray
    normal: np.ndarray
    node_ids: np.ndarray


@dataclass
class ReferenceElement:
    dim: int
    shape: str
    order: int
    nodes: np.ndarray
    facets: list = field(default_factory=list)
    # per node: list of (a0, grad) affine factors, value = a0 + grad @ r
    _factors: list = field(default_factory=list, repr=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def contains(self, r, tol=_DOMAIN_TOL):
        r = np.asarray(r, dtype=float)
        if self.shape == "tri":
            return bool(r[0] >= -tol and r[1] >= -tol and r[0] + r[1] <= 1.0 + tol)
        return bool(np.all(np.abs(r) <= 1.0 + tol))

    def tabulate(self, points, hessian=False):
        """Evaluate all basis functions at points (n_pts, dim).

        Returns (values, grads, hessians) with shapes (n_pts, n_nodes),
        (n_pts, n_nodes, dim) and (n_pts, n_nodes, dim, dim); the Hessian
        entry is None unless requested.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n_pts = pts.shape[0]
        n_no = self.n_nodes
        d = self.dim
        V = np.empty((n_pts, n_no))
        G = np.empty((n_pts, n_no, d))
        H = np.zeros((n_pts, n_no, d, d)) if hessian else None
        for a, factors in enumerate(self._factors):
            v = np.ones(n_pts)
            g = np.zeros((n_pts, d))
            h = np.zeros((n_pts, d, d)) if hessian else None
            for a0, gf in factors:
                f = a0 + pts @ gf
                if hessian:
                    h = h * f[:, None, None] + g[:, :, None] * gf[None, None, :]
                    h += gf[None, :, None] * g[:, None, :]
                g = g * f[:, None] + v[:, None] * gf[None, :]
                v = v * f
            V[:, a] = v
            G[:, a] = g
            if hessian:
                H[:, a] = h
        return V, G, H


def _line_factors(order):
    """Affine factors of the 1D Lagrange basis on equally spaced nodes."""
    xs = np.linspace(-1.0, 1.0, order + 1)
    per_node = []
    for i in range(order + 1):
        fac = []
        for m in range(order + 1):
            if m == i:
                continue
            den = xs[i] - xs[m]
            fac.append((-xs[m] / den, 1.0 / den))
        per_node.append(fac)
    return xs, per_node


def _tensor_element(dim, shape, order):
    xs, fac1d = _line_factors(order)
    n1 = order + 1
    idx = np.indices((n1,) * dim)  # idx[k] varies along axis k
    # x fastest: node index = ix + n1*iy + n1^2*iz
    multi = np.stack([idx[k].ravel(order="F") for k in range(dim)], axis=1)
    nodes = xs[multi]
    factors = []
    for mi in multi:
        fac = []
        for k in range(dim):
            for a0, g in fac1d[mi[k]]:
                gv = np.zeros(dim)
                gv[k] = g
                fac.append((a0, gv))
        factors.append(fac)
    return ReferenceElement(dim, shape, order, nodes, _factors=factors)


def _tri_element(order):
    p = order
    nodes = []
    factors = []
    for b in range(p + 1):
        for a in range(p + 1 - b):
            c = p - a - b
            nodes.append((a / p, b / p))
            fac = []
            for m in range(a):  # p*x climbs past m
                den = a - m
                fac.append((-m / den, np.array([p / den, 0.0])))
            for m in range(b):
                den = b - m
                fac.append((-m / den, np.array([0.0, p / den])))
            for m in range(c):  # p*(1-x-y) climbs past m
                den = c - m
                fac.append(((p - m) / den, np.array([-p / den, -p / den])))
            factors.append(fac)
    return ReferenceElement(2, "tri", order, np.array(nodes), _factors=factors)


def _facet_node_ids(elem, origin, axes, normal):
    rel = elem.nodes - origin[None, :]
    on = np.abs(rel @ normal) < 1e-12
    ids = np.nonzero(on)[0]
    # order by facet parameters, last axis slowest
    t = rel[ids] @ axes / np.sum(axes * axes, axis=0)[None, :]
    order = np.lexsort(tuple(t[:, k] for k in range(t.shape[1])))
    return ids[order]


def _attach_facets(elem):
    d, s = elem.dim, elem.shape
    specs = []
    if s == "quad":
        e0, e1 = np.eye(2)
        specs = [
            (np.array([0.0, -1.0]), e0[:, None], np.array([0.0, -1.0])),
            (np.array([1.0, 0.0]), e1[:, None], np.array([1.0, 0.0])),
            (np.array([0.0, 1.0]), e0[:, None], np.array([0.0, 1.0])),
            (np.array([-1.0, 0.0]), e1[:, None], np.array([-1.0, 0.0])),
        ]
    elif s == "tri":
        r2 = math.sqrt(2.0)
        specs = [
            (np.array([0.5, 0.0]), np.array([[0.5], [0.0]]), np.array([0.0, -1.0])),
            (np.array([0.5, 0.5]), np.array([[-0.5], [0.5]]), np.array([1 / r2, 1 / r2])),
            (np.array([0.0, 0.5]), np.array([[0.0], [-0.5]]), np.array([-1.0, 0.0])),
        ]
    elif s == "hex":
        E = np.eye(3)
        for k in range(3):
            t1, t2 = E[:, (k + 1) % 3], E[:, (k + 2) % 3]
            axes = np.stack([t1, t2], axis=1)
            for sign in (-1.0, 1.0):
                specs.append((sign * E[:, k], axes, sign * E[:, k]))
    for origin, axes, normal in specs:
        elem.facets.append(
            Facet(origin, axes, normal, _facet_node_ids(elem, origin, axes, normal))
        )
    return elem


_SHAPES = {"line": 1, "tri": 2, "quad": 2, "hex": 3}


def make_reference_element(dim, shape, order):
    """Build the Lagrange reference element for a shape/order pair."""
    if shape not in _SHAPES:
        raise ConfigError(f"unknown element shape {shape!r}")
    if _SHAPES[shape] != dim:
        raise ConfigError(f"shape {shape!r} is {_SHAPES[shape]}-dimensional, got dim={dim}")
    if not (1 <= order <= MAX_ORDER):
        raise ConfigError(f"order must be in 1..{MAX_ORDER}, got {order}")
    if shape == "tri":
        elem = _tri_element(order)
    else:
        elem = _tensor_element(dim, shape, order)
    if shape != "line":
        _attach_facets(elem)
    return elem


def shape_eval(elem, r):
    """Values, gradients and Hessians of all basis functions at one point."""
    r = np.asarray(r, dtype=float).reshape(-1)
    if r.shape[0] != elem.dim:
        raise ConfigError(f"point has dim {r.shape[0]}, element has dim {elem.dim}")
    if not elem.contains(r):
        raise GeometryError(f"point {r} is outside the {elem.shape} reference domain")
    V, G, H = elem.tabulate(r[None, :], hessian=True)
    return V[0], G[0], H[0]


def _gauss_1d(degree):
    n = max(1, (degree + 2) // 2)
    x, w = leggauss(n)
    return x, w


def _tri_quadrature(degree):
    # Duffy map x = u*(1-v), y = v with the (1-v) factor absorbed into a
    # Gauss-Jacobi rule, so total degree `degree` is integrated exactly.
    n = max(1, (degree + 2) // 2)
    xu, wu = leggauss(n)
    xv, wv = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (xu + 1.0)
    v = 0.5 * (xv + 1.0)
    U, Vv = np.meshgrid(u, v, indexing="ij")
    W = np.outer(0.5 * wu, 0.25 * wv)
    pts = np.stack([(U * (1.0 - Vv)).ravel(), Vv.ravel()], axis=1)
    return QuadratureRule(pts, W.ravel())


def make_quadrature(elem, degree=0):
    """Quadrature rule on the reference element, exact to `degree`.

    degree 0 picks the default 2*order+1 used by the assembly routines.
    """
    if degree < 0:
        raise ConfigError(f"quadrature degree must be >= 0, got {degree}")
    if degree == 0:
        degree = 2 * elem.order + 1
    if elem.shape == "tri":
        return _tri_quadrature(degree)
    x, w = _gauss_1d(degree)
    if elem.dim == 1:
        return QuadratureRule(x[:, None], w.copy())
    grids = np.meshgrid(*([x] * elem.dim), indexing="ij")
    pts = np.stack([g.ravel(order="F") for g in grids], axis=1)
    grids_w = np.meshgrid(*([w] * elem.dim), indexing="ij")
    wt = np.ones(pts.shape[0])
    for g in grids_w:
        wt = wt * g.ravel(order="F")
    return QuadratureRule(pts, wt)


def facet_element(elem):
    """Reference element of the facets (line for 2D shapes, quad for hex)."""
    if elem.shape == "hex":
        return make_reference_element(2, "quad", elem.order)
    if elem.shape in ("quad", "tri"):
        return make_reference_element(1, "line", elem.order)
    raise ConfigError(f"{elem.shape} elements have no facet element")


def facet_points_to_element(facet, t):
    """Map facet reference coordinates t (n, fdim) into element coordinates."""
    t = np.atleast_2d(np.asarray(t, dtype=float))
    return facet.origin[None, :] + t @ facet.axes.T
