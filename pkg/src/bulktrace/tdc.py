"""Tangential calculus on the implied level sets and co-area integration.

All domain integrals run over the bulk mesh with modified quadrature weights
w_ref * detJ * ||grad_X phi_h||, which integrates over every level set at
once.  Boundary integrals carry the division-free conormal pairing
||P M|| * ||grad_X phi_h||, which vanishes continuously where level sets
touch the boundary tangentially.
"""

import numpy as np
from numpy.polynomial.legendre import leggauss

from .exceptions import ConfigError
from .levelset import LevelSetField, projector
from .mesh import facet_frames
from .refelem import make_quadrature


# ---------------------------------------------------------------------------
# pointwise operators (batched over leading axes)


def surface_grad_scalar(P, grad_f):
    """In-plane part of a scalar gradient: P grad_f."""
    return np.einsum("...ij,...j->...i", P, grad_f)


def surface_grad_vector(P, grad_u, kind="directional"):
    """Surface gradient of a vector field from its bulk gradient.

    kind "directional" gives grad_u P, "covariant" gives P grad_u P.
    """
    if kind == "directional":
        return np.einsum("...ik,...kj->...ij", grad_u, P)
    if kind == "covariant":
        return np.einsum("...li,...ik,...kj->...lj", P, grad_u, P)
    raise ConfigError(f"unknown surface gradient kind {kind!r}")


def surface_div_vector(P, grad_u):
    """Surface divergence tr(grad_u P)."""
    return np.einsum("...ik,...ki->...", grad_u, P)


def surface_div_tensor(P, grad_A):
    """Row-wise surface divergence of a tensor, grad_A[..., i, j, k] = dA_ij/dX_k."""
    return np.einsum("...ijk,...kj->...i", grad_A, P)


def mean_curvature_from_parts(grad_phi, hess_phi):
    """div(grad phi/||grad phi||) = (tr H - N.H.N)/||grad phi||."""
    g = np.asarray(grad_phi, dtype=float)
    H = np.asarray(hess_phi, dtype=float)
    nrm = np.linalg.norm(g, axis=-1)
    N = g / nrm[..., None]
    tr = np.trace(H, axis1=-2, axis2=-1)
    nhn = np.einsum("...i,...ij,...j->...", N, H, N)
    return (tr - nhn) / nrm


def mean_curvature(field, X):
    """Additive mean curvature of the analytic field's level sets at X."""
    return mean_curvature_from_parts(field.grad(X), field.hess(X))


# ---------------------------------------------------------------------------
# quadrature-point pipeline


class QPBatch:
    """Per-element quadrature data for a chunk of elements.

    Arrays are indexed (element-in-chunk, qp, ...).  wmod is the modified
    co-area weight w_ref*detJ*||grad phi_h||; wgeo omits the field factor.
    """

    __slots__ = (
        "elements", "V", "gradN", "X", "w_ref", "detJ", "JinvT", "gphi",
        "gnorm", "N", "P", "wmod", "wgeo", "hessN", "Hphi",
    )


def _as_levelset(mesh, field):
    if isinstance(field, LevelSetField):
        if field.mesh is not mesh:
            raise ConfigError("level-set field belongs to another mesh")
        return field
    return LevelSetField(mesh, analytic=field)


def qp_batches(mesh, phi_nodal, degree=0, hessian=False, chunk_size=None):
    """Iterate QPBatch chunks over all elements, in element order."""
    quad = make_quadrature(mesh.elem, degree)
    V, G, H = mesh.elem.tabulate(quad.points, hessian=hessian)
    n_el = mesh.n_elements
    if chunk_size is None:
        chunk_size = 512 if mesh.dim == 2 else 64
    phi = np.asarray(phi_nodal, dtype=float)
    for start in range(0, n_el, chunk_size):
        els = np.arange(start, min(start + chunk_size, n_el))
        yield _qp_batch(mesh, phi, els, quad, V, G, H, hessian)


def _qp_batch(mesh, phi, els, quad, V, G, H, hessian):
    b = QPBatch()
    b.elements = els
    b.V = V
    b.w_ref = quad.weights
    conn = mesh.conn[els]
    Xe = mesh.coords[conn]
    b.X = np.einsum("qn,cnd->cqd", V, Xe)
    J = np.einsum("cnd,qni->cqdi", Xe, G)
    b.detJ = np.linalg.det(J)
    b.JinvT = np.swapaxes(np.linalg.inv(J), -1, -2)
    b.gradN = np.einsum("cqdi,qni->cqnd", b.JinvT, G)
    phie = phi[conn]
    b.gphi = np.einsum("cn,cqnd->cqd", phie, b.gradN)
    b.gnorm = np.linalg.norm(b.gphi, axis=-1)
    b.N = b.gphi / b.gnorm[..., None]
    b.P = projector(b.N)
    b.wgeo = quad.weights[None, :] * b.detJ
    b.wmod = b.wgeo * b.gnorm
    if hessian:
        # X-frame Hessians: pull the parameter Hessian back through the map,
        # removing the curvature of the map itself
        d2X = np.einsum("cnd,qnjk->cqdjk", Xe, H)
        corr = np.einsum("cqnd,cqdjk->cqnjk", b.gradN, d2X)
        Href = H[None, :, :, :, :] - corr
        Jinv = np.swapaxes(b.JinvT, -1, -2)
        b.hessN = np.einsum("cqdj,cqnjk,cqki->cqndi", b.JinvT, Href, Jinv)
        b.Hphi = np.einsum("cn,cqnjk->cqjk", phie, b.hessN)
    else:
        b.hessN = None
        b.Hphi = None
    return b


def grad_at_qp(batch, nodal_conn_values):
    """Gradient of a nodal field on the chunk: values (c, n[, m]) -> (c, q[, m], d)."""
    v = nodal_conn_values
    if v.ndim == 2:
        return np.einsum("cn,cqnd->cqd", v, batch.gradN)
    return np.einsum("cnm,cqnd->cqmd", v, batch.gradN)


# ---------------------------------------------------------------------------
# co-area integrals


def _wrap_integrand(integrand):
    if callable(integrand):
        return integrand
    val = float(integrand)
    return lambda X: np.full(X.shape[:-1], val)


def coarea_integrate_domain(mesh, field, integrand, degree=0, use_interpolant=True):
    """Integral of f over every level set at once: int f ||grad phi|| dOmega."""
    lsf = _as_levelset(mesh, field)
    fn = _wrap_integrand(integrand)
    total = 0.0
    for b in qp_batches(mesh, lsf.nodal, degree):
        vals = np.asarray(fn(b.X), dtype=float)
        if use_interpolant:
            w = b.wmod
        else:
            w = b.wgeo * np.linalg.norm(lsf.analytic.grad(b.X), axis=-1)
        total += float(np.sum(vals * w))
    return total


def boundary_qp_data(mesh, field, tags, degree=0):
    """Per-facet quadrature data on tagged boundary parts.

    Yields (frame, data) where data carries X, M, N, P, gnorm, the conormal
    pairing factor pm = ||P M||, and the surface weights of the facet rule.
    """
    lsf = _as_levelset(mesh, field)
    phi = lsf.nodal
    for fr in facet_frames(mesh, tags, degree):
        V, G, _ = mesh.elem.tabulate(fr.points_ref)
        conn = mesh.conn[fr.element]
        Xe = mesh.coords[conn]
        J = np.einsum("nd,qni->qdi", Xe, G)
        JinvT = np.swapaxes(np.linalg.inv(J), -1, -2)
        gphi = np.einsum("qdi,qi->qd", JinvT, phi[conn] @ G)
        gnorm = np.linalg.norm(gphi, axis=-1)
        N = gphi / gnorm[..., None]
        P = projector(N)
        PM = np.einsum("qij,qj->qi", P, fr.normals)
        data = {
            "X": fr.X,
            "M": fr.normals,
            "N": N,
            "P": P,
            "PM": PM,
            "pm": np.linalg.norm(PM, axis=-1),
            "gnorm": gnorm,
            "weights": fr.weights,
            "V": V,
            "conn": conn,
        }
        yield fr, data


def coarea_integrate_boundary(mesh, field, tags, integrand, degree=0):
    """Integral of f over the boundary curves/points of every level set.

    Computes int f ||P M|| ||grad phi|| ds over the tagged boundary parts;
    the ||P M|| factor is the conormal pairing Q.M written division-free.
    """
    fn = _wrap_integrand(integrand)
    total = 0.0
    for fr, data in boundary_qp_data(mesh, field, tags, degree):
        vals = np.asarray(fn(data["X"]), dtype=float)
        total += float(np.sum(vals * data["pm"] * data["gnorm"] * data["weights"]))
    return total


def gauss_levelset_integrate(field, interval, n_gauss, per_level):
    """Gauss-Legendre sum of per_level(c) over the level interval."""
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ConfigError("level interval must be increasing")
    x, w = leggauss(int(n_gauss))
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return float(sum(half * wi * per_level(mid + half * xi) for xi, wi in zip(x, w)))


def check_divergence_theorem(mesh, field, w_fn, gradw_fn, A_fn, gradA_fn,
                             degree=0, boundary_tags=None, excluded_tags=None):
    """Residual of the surface divergence theorem summed over all level sets.

    For v = A^T w on each level set:
      int (w . div_G A + A : grad_dir w) ||g|| dX
        = int kappa_h (w . A N) ||g|| dX + int_bdry w . A (P M) ||g|| ds.
    Returns a dict of the four terms and the absolute residual.
    """
    lsf = _as_levelset(mesh, field)
    t_div = t_grad = t_curv = 0.0
    for b in qp_batches(mesh, lsf.nodal, degree, hessian=True):
        w = np.asarray(w_fn(b.X), dtype=float)
        gw = np.asarray(gradw_fn(b.X), dtype=float)
        A = np.asarray(A_fn(b.X), dtype=float)
        gA = np.asarray(gradA_fn(b.X), dtype=float)
        divA = surface_div_tensor(b.P, gA)
        t_div += float(np.sum(np.einsum("cqi,cqi->cq", w, divA) * b.wmod))
        gdir = surface_grad_vector(b.P, gw, "directional")
        t_grad += float(np.sum(np.einsum("cqij,cqij->cq", A, gdir) * b.wmod))
        kappa = mean_curvature_from_parts(b.gphi, b.Hphi)
        wAN = np.einsum("cqi,cqij,cqj->cq", w, A, b.N)
        t_curv += float(np.sum(kappa * wAN * b.wmod))
    if boundary_tags is None:
        excl = ({t for t in mesh.boundary_tags if t.startswith("levelset")}
                if excluded_tags is None else set(excluded_tags))
        boundary_tags = [t for t in mesh.boundary_tags if t not in excl]
    t_bdry = 0.0
    for fr, data in boundary_qp_data(mesh, field, boundary_tags, degree):
        w = np.asarray(w_fn(data["X"]), dtype=float)
        A = np.asarray(A_fn(data["X"]), dtype=float)
        wAPM = np.einsum("qi,qij,qj->q", w, A, data["PM"])
        t_bdry += float(np.sum(wAPM * data["gnorm"] * data["weights"]))
    residual = abs(t_div + t_grad - t_curv - t_bdry)
    return {
        "div_term": t_div,
        "grad_term": t_grad,
        "curvature_term": t_curv,
        "boundary_term": t_bdry,
        "residual": residual,
    }
