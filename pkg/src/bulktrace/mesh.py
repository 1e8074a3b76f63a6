"""Curved isoparametric meshes: block construction, file io, geometry queries.

Meshes are built from mapped structured blocks whose lattices are welded into
one node set.  Boundary parts carry string tags; parts that coincide with
level sets of the driving scalar field use tags starting with "levelset" so
downstream checks can exclude them by default.
"""

import itertools
import json
import math

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ConfigError, GeometryError
from .refelem import (
    Facet,
    facet_element,
    facet_points_to_element,
    make_quadrature,
    make_reference_element,
)

MESH_FORMAT = "btf-mesh-1"


class Mesh:
    """Unstructured high-order mesh of one element shape."""

    def __init__(self, dim, shape, order, coords, conn, boundary):
        self.dim = dim
        self.shape = shape
        self.order = order
        self.coords = np.asarray(coords, dtype=float)
        self.conn = np.asarray(conn, dtype=np.int64)
        self.boundary = [(int(e), int(f), str(t)) for e, f, t in boundary]
        self.elem = make_reference_element(dim, shape, order)
        self._centroid_tree = None
        if self.conn.shape[1] != self.elem.n_nodes:
            raise GeometryError(
                f"connectivity has {self.conn.shape[1]} nodes per element, "
                f"{shape} order {order} needs {self.elem.n_nodes}"
            )
        if self.conn.size and (self.conn.min() < 0 or self.conn.max() >= len(self.coords)):
            raise GeometryError("connectivity references nodes outside the coordinate table")
        for e, f, _ in self.boundary:
            if not (0 <= e < self.n_elements) or not (0 <= f < len(self.elem.facets)):
                raise GeometryError(f"boundary entry ({e},{f}) out of range")

    @property
    def n_nodes(self):
        return self.coords.shape[0]

    @property
    def n_elements(self):
        return self.conn.shape[0]

    @property
    def boundary_tags(self):
        return sorted({t for _, _, t in self.boundary})

    def element_coords(self, e=None):
        if e is None:
            return self.coords[self.conn]
        return self.coords[self.conn[e]]

    def h_max(self):
        """Largest element diameter, measured over element nodes."""
        X = self.coords[self.conn]
        lo = X.min(axis=1)
        hi = X.max(axis=1)
        return float(np.linalg.norm(hi - lo, axis=1).max())


# ---------------------------------------------------------------------------
# file io


def mesh_to_dict(mesh):
    return {
        "format": MESH_FORMAT,
        "dim": mesh.dim,
        "shape": mesh.shape,
        "order": mesh.order,
        "nodes": [[float(v) for v in row] for row in mesh.coords],
        "elements": [[int(v) for v in row] for row in mesh.conn],
        "boundary": [[e, f, t] for e, f, t in mesh.boundary],
    }


def mesh_from_dict(data):
    for key in ("format", "dim", "shape", "order", "nodes", "elements", "boundary"):
        if key not in data:
            raise ConfigError(f"mesh file is missing key {key!r}")
    if data["format"] != MESH_FORMAT:
        raise ConfigError(f"unsupported mesh format {data['format']!r}")
    return Mesh(
        int(data["dim"]),
        str(data["shape"]),
        int(data["order"]),
        np.array(data["nodes"], dtype=float),
        np.array(data["elements"], dtype=np.int64),
        [(e, f, t) for e, f, t in data["boundary"]],
    )


def save_mesh(mesh, path):
    # json floats use repr, which round-trips binary64 exactly
    with open(path, "w") as fh:
        json.dump(mesh_to_dict(mesh), fh)
        fh.write("\n")


def load_mesh(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"mesh file {path} is not valid JSON: {exc}") from exc
    return mesh_from_dict(data)


# ---------------------------------------------------------------------------
# structured block builder

_SIDE_TO_FACET_2D = {"a0": 3, "a1": 1, "b0": 0, "b1": 2}
_SIDE_TO_FACET_3D = {"a0": 0, "a1": 1, "b0": 2, "b1": 3, "c0": 4, "c1": 5}


class BlockBuilder:
    """Collects mapped structured blocks and welds them into a Mesh.

    Each block is a map f(u) of the unit square/cube onto the physical
    domain, evaluated on an order-p lattice.  Coinciding lattice points of
    neighbouring blocks are welded within a relative tolerance, so block
    seams need to agree only to roundoff, not bitwise.
    """

    def __init__(self, dim, order):
        if dim not in (2, 3):
            raise ConfigError("block meshes are 2D or 3D")
        self.dim = dim
        self.order = order
        self.blocks = []

    def add_block(self, map_fn, counts, tags=None, snaps=None):
        """Add one block.

        map_fn: (n, dim) array of unit-cube params -> (n, dim) coordinates.
        counts: elements per direction, length dim.
        tags: dict side -> tag, side in {a0,a1,b0,b1[,c0,c1]}.
        snaps: dict side -> projection applied to that side's nodes.
        """
        counts = tuple(int(c) for c in counts)
        if len(counts) != self.dim or any(c < 1 for c in counts):
            raise ConfigError(f"bad block counts {counts}")
        side_map = _SIDE_TO_FACET_2D if self.dim == 2 else _SIDE_TO_FACET_3D
        for side in (tags or {}):
            if side not in side_map:
                raise ConfigError(f"unknown block side {side!r}")
        self.blocks.append((map_fn, counts, dict(tags or {}), dict(snaps or {})))

    def _block_lattice(self, map_fn, counts, snaps):
        p = self.order
        npts = [c * p + 1 for c in counts]
        axes = [np.arange(n) / (n - 1) for n in npts]
        grids = np.meshgrid(*axes, indexing="ij")
        params = np.stack([g.ravel(order="F") for g in grids], axis=1)
        X = np.asarray(map_fn(params), dtype=float)
        if X.shape != (params.shape[0], self.dim):
            raise GeometryError("block map returned wrong shape")
        # lattice index helper: id = i + npts[0]*(j + npts[1]*k)
        for side, proj in snaps.items():
            sel = self._side_node_ids(npts, side)
            X[sel] = proj(X[sel])
        return X, npts

    def _side_node_ids(self, npts, side):
        axis = {"a": 0, "b": 1, "c": 2}[side[0]]
        val = 0 if side[1] == "0" else npts[axis] - 1
        idx = np.indices(npts)
        mask = idx[axis] == val
        flat = np.nonzero(mask.ravel(order="F"))[0]
        return flat

    def build(self, weld_tol=None):
        all_X = []
        offsets = []
        total = 0
        lattices = []
        for map_fn, counts, tags, snaps in self.blocks:
            X, npts = self._block_lattice(map_fn, counts, snaps)
            offsets.append(total)
            total += X.shape[0]
            all_X.append(X)
            lattices.append(npts)
        pts = np.vstack(all_X)
        scale = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        tol = weld_tol if weld_tol is not None else 1e-9 * max(scale, 1.0)
        tree = cKDTree(pts)
        pairs = tree.query_pairs(tol, output_type="ndarray")
        parent = np.arange(pts.shape[0])

        def find(i):
            root = i
            while parent[root] != root:
                root = parent[root]
            while parent[i] != root:
                parent[i], i = root, parent[i]
            return root

        for i, j in pairs:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
        root = np.array([find(i) for i in range(pts.shape[0])])
        uniq, global_id = np.unique(root, return_inverse=True)
        coords = pts[uniq]

        p = self.order
        conn = []
        boundary = []
        side_map = _SIDE_TO_FACET_2D if self.dim == 2 else _SIDE_TO_FACET_3D
        el_offset = 0
        for b, (map_fn, counts, tags, snaps) in enumerate(self.blocks):
            npts = lattices[b]
            off = offsets[b]
            strides = [1, npts[0], npts[0] * npts[1]][: self.dim]
            local = np.meshgrid(*[np.arange(p + 1)] * self.dim, indexing="ij")
            local_flat = np.stack([g.ravel(order="F") for g in local], axis=1)
            cells = list(itertools.product(*[range(c) for c in reversed(counts)]))
            # iterate with first axis fastest
            cells = [tuple(reversed(c)) for c in cells]
            for cell_i, cell in enumerate(cells):
                base = sum(cell[k] * p * strides[k] for k in range(self.dim))
                ids = base + local_flat @ np.array(strides)
                conn.append(global_id[off + ids])
                for side, tag in tags.items():
                    axis = {"a": 0, "b": 1, "c": 2}[side[0]]
                    edge = 0 if side[1] == "0" else counts[axis] - 1
                    if cell[axis] == edge:
                        boundary.append((el_offset + cell_i, side_map[side], tag))
            el_offset += len(cells)
        shape = "quad" if self.dim == 2 else "hex"
        return Mesh(self.dim, shape, self.order, coords, np.array(conn), boundary)


# ---------------------------------------------------------------------------
# generators


def _disk_blocks(builder, center, radius, n, n_rad, outer_tag="outer", z_aware=None):
    """Five-block O-grid of a disk; exact nodes on the bounding circle."""
    c = np.asarray(center, dtype=float)
    w = 0.5 * radius

    def center_map(u):
        return c[None, :] + w * (2.0 * u - 1.0)

    builder.add_block(center_map, (n, n))

    def snap_circle(X):
        v = X - c[None, :]
        r = np.linalg.norm(v, axis=1, keepdims=True)
        return c[None, :] + radius * v / r

    for sector in range(4):
        rot = sector * math.pi / 2.0

        def sector_map(u, rot=rot):
            t, s = u[:, 0], 2.0 * u[:, 1] - 1.0
            ca, sa = math.cos(rot), math.sin(rot)
            ax, ay = w * 1.0, w * s  # inner square edge, east sector frame
            bx = radius * np.cos(rot + s * math.pi / 4.0)
            by = radius * np.sin(rot + s * math.pi / 4.0)
            ix = ca * ax - sa * ay
            iy = sa * ax + ca * ay
            x = (1.0 - t) * ix + t * bx
            y = (1.0 - t) * iy + t * by
            return c[None, :] + np.stack([x, y], axis=1)

        builder.add_block(
            sector_map,
            (n_rad, n),
            tags={"a1": outer_tag},
            snaps={"a1": snap_circle},
        )
    return builder


def generate_mesh(case, params=None, **kw):
    """Build one of the named meshes.

    Cases: "disk", "band_tc1", "quarter_annulus", "spherical_slab".  params
    is a dict merged with keyword arguments; every case accepts "order" and
    its own count parameters.
    """
    cfg = dict(params or {})
    cfg.update(kw)
    gens = {
        "disk": _gen_disk,
        "band_tc1": _gen_band_tc1,
        "quarter_annulus": _gen_quarter_annulus,
        "spherical_slab": _gen_spherical_slab,
    }
    if case not in gens:
        raise ConfigError(f"unknown mesh case {case!r}; known: {sorted(gens)}")
    return gens[case](cfg)


def _take(cfg, key, default=None):
    if default is None and key not in cfg:
        raise ConfigError(f"mesh case needs parameter {key!r}")
    return cfg.pop(key, default)


def _finish(cfg, case):
    if cfg:
        raise ConfigError(f"unknown parameters for mesh case {case!r}: {sorted(cfg)}")


def _gen_disk(cfg):
    order = int(_take(cfg, "order", 2))
    n = int(_take(cfg, "n", 4))
    n_rad = int(_take(cfg, "n_rad", n))
    radius = float(_take(cfg, "radius", 0.28))
    center = np.asarray(_take(cfg, "center", (0.0, 0.0)), dtype=float)
    _finish(cfg, "disk")
    b = BlockBuilder(2, order)
    _disk_blocks(b, center, radius, n, n_rad)
    return b.build()


_TC1_CENTER_ANGLE = math.radians(115.0)
TC1_CENTER = (0.3 * math.cos(_TC1_CENTER_ANGLE), 0.3 * math.sin(_TC1_CENTER_ANGLE))
TC1_DISK_RADIUS = 0.28
TC1_FIELD_RADIUS = 0.3


def _gen_band_tc1(cfg):
    """Band between two circular level sets, clipped by the disk boundary."""
    order = int(_take(cfg, "order", 2))
    n_s = int(_take(cfg, "n_s", 8))
    n_t = int(_take(cfg, "n_t", 2 * n_s))
    lo = float(_take(cfg, "phi_min", -0.15))
    hi = float(_take(cfg, "phi_max", 0.15))
    _finish(cfg, "band_tc1")
    XC = np.array(TC1_CENTER)
    beta = math.atan2(-XC[1], -XC[0])  # mid-arc direction, toward the origin
    RD = TC1_DISK_RADIUS
    R0 = TC1_FIELD_RADIUS

    def band_map(u):
        s = (R0 + lo) + (hi - lo) * u[:, 0]
        # the chord where the circle of radius s around XC meets the disk rim
        cosd = (RD * RD - R0 * R0 - s * s) / (2.0 * R0 * s)
        delta = np.arccos(np.clip(cosd, -1.0, 1.0))
        alpha = beta + (2.0 * u[:, 1] - 1.0) * (math.pi - delta)
        return XC[None, :] + s[:, None] * np.stack([np.cos(alpha), np.sin(alpha)], axis=1)

    def snap_rim(X):
        r = np.linalg.norm(X, axis=1, keepdims=True)
        return RD * X / r

    def snap_level(X, s):
        v = X - XC[None, :]
        r = np.linalg.norm(v, axis=1, keepdims=True)
        return XC[None, :] + s * v / r

    b = BlockBuilder(2, order)
    b.add_block(
        band_map,
        (n_s, n_t),
        tags={"a0": "levelset_min", "a1": "levelset_max", "b0": "outer", "b1": "outer"},
        snaps={
            "a0": lambda X: snap_level(X, R0 + lo),
            "a1": lambda X: snap_level(X, R0 + hi),
            "b0": snap_rim,
            "b1": snap_rim,
        },
    )
    return b.build()


def _gen_quarter_annulus(cfg):
    order = int(_take(cfg, "order", 2))
    n_r = int(_take(cfg, "n_r", 4))
    n_th = int(_take(cfg, "n_th", 2 * n_r))
    r_in = float(_take(cfg, "r_in", 8.0))
    r_out = float(_take(cfg, "r_out", 12.0))
    _finish(cfg, "quarter_annulus")

    def amap(u):
        r = r_in + (r_out - r_in) * u[:, 0]
        th = 0.5 * math.pi * u[:, 1]
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)

    def snap_r(X, r):
        d = np.linalg.norm(X, axis=1, keepdims=True)
        return r * X / d

    def snap_bottom(X):
        X = X.copy()
        X[:, 1] = 0.0
        return X

    def snap_left(X):
        X = X.copy()
        X[:, 0] = 0.0
        return X

    b = BlockBuilder(2, order)
    b.add_block(
        amap,
        (n_r, n_th),
        tags={"a0": "levelset_inner", "a1": "levelset_outer", "b0": "bottom", "b1": "left"},
        snaps={
            "a0": lambda X: snap_r(X, r_in),
            "a1": lambda X: snap_r(X, r_out),
            "b0": snap_bottom,
            "b1": snap_left,
        },
    )
    return b.build()


def _gen_spherical_slab(cfg):
    """Slab of the unit ball between two horizontal cuts, lateral on the sphere."""
    order = int(_take(cfg, "order", 2))
    n = int(_take(cfg, "n", 2))
    n_rad = int(_take(cfg, "n_rad", n))
    n_z = int(_take(cfg, "n_z", max(2, n)))
    z_min = float(_take(cfg, "z_min", -0.2))
    z_max = float(_take(cfg, "z_max", 0.4))
    _finish(cfg, "spherical_slab")
    if not (-1.0 < z_min < z_max < 1.0):
        raise ConfigError("spherical_slab needs -1 < z_min < z_max < 1")
    w = 0.5

    def zval(t):
        return z_min + (z_max - z_min) * t

    def rz(z):
        return np.sqrt(1.0 - z * z)

    def extrude(disk_xy):
        def emap(u):
            z = zval(u[:, 2])
            s = rz(z)
            xy = disk_xy(u[:, :2])
            return np.stack([xy[:, 0] * s, xy[:, 1] * s, z], axis=1)

        return emap

    def center_xy(u):
        return w * (2.0 * u - 1.0)

    def snap_sphere(X):
        z = X[:, 2:3]
        s = np.sqrt((1.0 - z[:, 0] ** 2) / (X[:, 0] ** 2 + X[:, 1] ** 2))[:, None]
        return np.concatenate([X[:, :2] * s, z], axis=1)

    def snap_cap(X, z):
        X = X.copy()
        X[:, 2] = z
        return X

    cap_tags = {"c0": "levelset_cap", "c1": "levelset_cap"}
    cap_snaps = {"c0": lambda X: snap_cap(X, z_min), "c1": lambda X: snap_cap(X, z_max)}
    b = BlockBuilder(3, order)
    b.add_block(extrude(center_xy), (n, n, n_z), tags=dict(cap_tags), snaps=dict(cap_snaps))
    for sector in range(4):
        rot = sector * math.pi / 2.0

        def sector_xy(u, rot=rot):
            t, s = u[:, 0], 2.0 * u[:, 1] - 1.0
            ca, sa = math.cos(rot), math.sin(rot)
            ax, ay = w, w * s
            bx = np.cos(rot + s * math.pi / 4.0)
            by = np.sin(rot + s * math.pi / 4.0)
            ix = ca * ax - sa * ay
            iy = sa * ax + ca * ay
            return np.stack(
                [(1.0 - t) * ix + t * bx, (1.0 - t) * iy + t * by], axis=1
            )

        tags = {"a1": "lateral"}
        tags.update(cap_tags)
        snaps = {"a1": snap_sphere}
        snaps.update(cap_snaps)
        b.add_block(extrude(sector_xy), (n_rad, n, n_z), tags=tags, snaps=snaps)
    return b.build()


# ---------------------------------------------------------------------------
# geometry queries


def element_map(mesh, e, r):
    """Isoparametric map data of element e at reference point r.

    Returns (X, J, detJ, JinvT, d2X) with J[i,j] = dX_i/dr_j and
    d2X[i,j,k] = d^2 X_i / dr_j dr_k.
    """
    r = np.asarray(r, dtype=float).reshape(-1)
    V, G, H = mesh.elem.tabulate(r[None, :], hessian=True)
    Xe = mesh.coords[mesh.conn[e]]
    X = V[0] @ Xe
    J = Xe.T @ G[0]
    detJ = float(np.linalg.det(J))
    if detJ <= 0.0:
        raise GeometryError(f"element {e} has non-positive Jacobian {detJ} at {r}")
    JinvT = np.linalg.inv(J).T
    d2X = np.einsum("nd,njk->djk", Xe, H[0])
    return X, J, detJ, JinvT, d2X


class FacetFrame:
    """Quadrature data of one boundary facet: physical points, outward unit
    normals, surface weights, and the owning element with in-element
    reference coordinates for shape-function evaluation."""

    def __init__(self, element, facet_id, tag, points_ref, X, normals, weights):
        self.element = element
        self.facet_id = facet_id
        self.tag = tag
        self.points_ref = points_ref
        self.X = X
        self.normals = normals
        self.weights = weights


def facet_frames(mesh, tags, degree=0):
    """FacetFrame list over the boundary parts with the given tag(s)."""
    if isinstance(tags, str):
        tags = [tags]
    tags = set(tags)
    known = set(mesh.boundary_tags)
    missing = tags - known
    if missing:
        raise ConfigError(f"unknown boundary tags {sorted(missing)}; mesh has {sorted(known)}")
    felem = facet_element(mesh.elem)
    quad = make_quadrature(felem, degree)
    frames = []
    for e, f, tag in mesh.boundary:
        if tag not in tags:
            continue
        facet = mesh.elem.facets[f]
        pts_ref = facet_points_to_element(facet, quad.points)
        V, G, _ = mesh.elem.tabulate(pts_ref)
        Xe = mesh.coords[mesh.conn[e]]
        X = V @ Xe
        J = np.einsum("nd,qni->qdi", Xe, G)
        tang = np.einsum("qdi,ik->qdk", J, facet.axes)
        if mesh.dim == 2:
            t = tang[:, :, 0]
            meas = np.linalg.norm(t, axis=1)
            nref = facet.normal
            n = np.einsum("qdi,i->qd", _inv_T(J), nref)
        else:
            cr = np.cross(tang[:, :, 0], tang[:, :, 1])
            meas = np.linalg.norm(cr, axis=1)
            n = np.einsum("qdi,i->qd", _inv_T(J), facet.normal)
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
        frames.append(FacetFrame(e, f, tag, pts_ref, X, n, quad.weights * meas))
    return frames


def _inv_T(J):
    return np.swapaxes(np.linalg.inv(J), -1, -2)


def locate_point(mesh, X, tol=1e-10, max_iter=40):
    """Find (element, reference coords) containing physical point X."""
    X = np.asarray(X, dtype=float).reshape(-1)
    if mesh._centroid_tree is None:
        cents = mesh.coords[mesh.conn].mean(axis=1)
        mesh._centroid_tree = (cKDTree(cents), cents)
    tree, cents = mesh._centroid_tree
    k = min(12, mesh.n_elements)
    _, cand = tree.query(X, k=k)
    cand = np.atleast_1d(cand)
    r0 = mesh.elem.nodes.mean(axis=0)
    for e in cand:
        r = r0.copy()
        ok = True
        for _ in range(max_iter):
            V, G, _ = mesh.elem.tabulate(r[None, :])
            Xe = mesh.coords[mesh.conn[e]]
            res = V[0] @ Xe - X
            if np.linalg.norm(res) < tol * max(1.0, np.linalg.norm(X)):
                break
            J = Xe.T @ G[0]
            try:
                dr = np.linalg.solve(J, res)
            except np.linalg.LinAlgError:
                ok = False
                break
            step = np.linalg.norm(dr)
            if step > 4.0:
                dr *= 4.0 / step
            r = r - dr
        else:
            ok = False
        if ok and mesh.elem.contains(r, tol=1e-8):
            return int(e), r
    raise GeometryError(f"point {X} not found in the mesh")


def evaluate_nodal(mesh, nodal, points):
    """Interpolate a nodal field (n_nodes,...) at physical points (m, dim)."""
    nodal = np.asarray(nodal)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = []
    for X in pts:
        e, r = locate_point(mesh, X)
        V, _, _ = mesh.elem.tabulate(r[None, :])
        out.append(np.tensordot(V[0], nodal[mesh.conn[e]], axes=(0, 0)))
    return np.array(out)


def validate_mesh(mesh, degree=0):
    """Positive Jacobian at all quadrature points; raises on failure."""
    quad = make_quadrature(mesh.elem, degree)
    _, G, _ = mesh.elem.tabulate(quad.points)
    Xe = mesh.coords[mesh.conn]
    J = np.einsum("cnd,qni->cqdi", Xe, G)
    detJ = np.linalg.det(J)
    if not np.all(detJ > 0.0):
        bad = np.argwhere(detJ <= 0.0)
        e, q = bad[0]
        raise GeometryError(
            f"non-positive Jacobian (min {detJ.min():.3e}) in element {e} at qp {q}"
        )
    return float(detJ.min())
