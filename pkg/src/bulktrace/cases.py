"""Registry of the canonical benchmark configurations.

Each case bundles its mesh family (refinement level -> resolution), level-set
field, material, load, and clamped boundary tags, plus frozen reference
values for the two global measures.  The CLI presets, the convergence
driver, and the test suite all build from here so a configuration exists in
exactly one place.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .exceptions import ConfigError
from .levelset import (
    LevelSetField,
    coordinate_field,
    radial_field,
)
from .mechanics import MaterialParams
from .mesh import TC1_CENTER, TC1_FIELD_RADIUS, generate_mesh

# frozen global measures the benchmark runs must reproduce
REFERENCE_VALUES = {
    "tc1-interval": {"D": 0.1644415441226, "e": 7.792649686407e-3},
    "tc2": {"D": 39.05000466379, "e": 2317.129363166},
    "tc3": {"D": 1.981355380281, "e": 6.588725461796},
    "tc4": {"D": 1.032907088507, "e": 1.863258461070},
    "tc5-prescribed": {"e": 11499.322459892},
}


@dataclass
class BuiltCase:
    """One concrete (order, level) instance of a registered case."""

    name: str
    mesh: object
    field: LevelSetField
    mat: MaterialParams
    body_force: object
    dirichlet: dict
    interval: tuple = None
    solver_options: object = None
    extras: dict = dc_field(default_factory=dict)

    def make_bvp(self):
        from .solver import BVP, SolverOptions

        opts = self.solver_options or SolverOptions()
        return BVP(self.mesh, self.field, self.mat, self.body_force,
                   dirichlet=self.dirichlet, options=opts)

    def solve(self):
        from .solver import newton_solve

        return newton_solve(self.make_bvp())


def _scaled(base, level):
    return tuple(int(round(b * 2 ** level)) for b in base)


def _tc1_interval(order, level, resolution=None):
    if resolution is None:
        n_s, n_t = _scaled((2, 8), level)
    else:
        n_s, n_t = resolution
    mesh = generate_mesh("band_tc1", {
        "order": order, "n_s": n_s, "n_t": n_t,
        "phi_min": -0.15, "phi_max": 0.15,
    })
    analytic = radial_field(TC1_CENTER, offset=TC1_FIELD_RADIUS)
    field = LevelSetField(mesh, analytic=analytic, interval=(-0.15, 0.15))
    from .solver import SolverOptions

    return BuiltCase(
        name="tc1-interval",
        mesh=mesh,
        field=field,
        mat=MaterialParams(E=1.0e4, kind="rope"),
        body_force=np.array([0.0, -100.0]),
        dirichlet={"outer": (0.0, 0.0)},
        interval=(-0.15, 0.15),
        solver_options=SolverOptions(prestress=0.0),
    )


def _tc1(order, level, resolution=None):
    n = resolution if resolution is not None else int(round(4 * 2 ** level))
    mesh = generate_mesh("disk", {"order": order, "n": n})
    analytic = radial_field(TC1_CENTER, offset=TC1_FIELD_RADIUS)
    field = LevelSetField(mesh, analytic=analytic)
    from .solver import SolverOptions

    return BuiltCase(
        name="tc1",
        mesh=mesh,
        field=field,
        mat=MaterialParams(E=1.0e4, kind="rope"),
        body_force=np.array([0.0, -100.0]),
        dirichlet={"outer": (0.0, 0.0)},
        solver_options=SolverOptions(prestress=0.0),
    )


def _tc3(order, level, resolution=None):
    if resolution is None:
        n, n_z = _scaled((1, 2), level)
    else:
        n, n_z = resolution
    mesh = generate_mesh("spherical_slab", {
        "order": order, "n": n, "n_z": n_z, "z_min": -0.2, "z_max": 0.4,
    })
    analytic = coordinate_field(axis=2, dim=3)
    field = LevelSetField(mesh, analytic=analytic, interval=(-0.2, 0.4))
    return BuiltCase(
        name="tc3",
        mesh=mesh,
        field=field,
        mat=MaterialParams(E=1000.0, nu=0.3, kind="membrane"),
        body_force=np.array([0.0, 0.0, -100.0]),
        dirichlet={"lateral": (0.0, 0.0, 0.0)},
        interval=(-0.2, 0.4),
    )


def _tc2(order, level, resolution=None):
    from .fixtures import tc2_patch

    n = resolution if resolution is not None else int(round(2 * 2 ** level))
    mesh, analytic, interval = tc2_patch(order=order, n=n)
    field = LevelSetField(mesh, analytic=analytic, interval=interval)
    from .solver import SolverOptions

    return BuiltCase(
        name="tc2",
        mesh=mesh,
        field=field,
        mat=MaterialParams(E=1.0e4, kind="rope"),
        body_force=np.array([0.0, -200.0]),
        dirichlet={t: (0.0, 0.0) for t in mesh.boundary_tags
                   if not t.startswith("levelset")},
        interval=interval,
        solver_options=SolverOptions(prestress=0.0),
    )


def _tc4(order, level, resolution=None):
    from .fixtures import tc4_patch

    if resolution is None:
        n = n_rad = n_c = int(round(1 * 2 ** level))
    elif isinstance(resolution, tuple):
        n, n_rad, n_c = resolution
    else:
        n = n_rad = n_c = resolution
    mesh, analytic, interval = tc4_patch(order=order, n=n, n_rad=n_rad,
                                         n_c=n_c)
    field = LevelSetField(mesh, analytic=analytic, interval=interval)
    return BuiltCase(
        name="tc4",
        mesh=mesh,
        field=field,
        mat=MaterialParams(E=1000.0, nu=0.3, kind="membrane"),
        body_force=np.array([0.0, 0.0, -100.0]),
        dirichlet={t: (0.0, 0.0, 0.0) for t in mesh.boundary_tags
                   if not t.startswith("levelset")},
        interval=interval,
    )


_BUILDERS = {
    "tc1": _tc1,
    "tc1-interval": _tc1_interval,
    "tc2": _tc2,
    "tc3": _tc3,
    "tc4": _tc4,
}

# (order, resolution) pairs the global-measure benchmarks run at
BENCHMARK_SETUP = {
    "tc1-interval": {"order": 4, "resolution": (8, 32), "n_steps": 10},
    "tc2": {"order": 4, "resolution": 8, "n_steps": 6},
    "tc3": {"order": 4, "resolution": (3, 2), "n_steps": 3},
    "tc4": {"order": 4, "resolution": (4, 4, 2), "n_steps": 2},
}

# Per-order refinement ladders the rate studies run.  Entries are either
# refinement-level ints or explicit resolutions; the 3D ladders refine the
# in-plane and through-interval directions together (the mesh-geometry
# error has independent components in each) and stop where a direct 3D
# factorization still fits memory.
STUDY_SETUP = {
    "tc1-interval": {
        "orders": (1, 2, 3, 4),
        "levels": {1: [0, 1, 2, 3, 4], 2: [0, 1, 2, 3],
                   3: [0, 1, 2, 3], 4: [0, 1, 2]},
    },
    "tc3": {
        "orders": (1, 2, 3, 4),
        "levels": {1: [(2, 2), (4, 4), (8, 8), (16, 16)],
                   2: [(1, 1), (2, 2), (4, 4), (6, 6)],
                   3: [(1, 1), (2, 2), (3, 3), (4, 4)],
                   4: [(1, 1), (2, 2), (3, 3)]},
        "n_steps": 3,
    },
}


def case_names():
    return sorted(_BUILDERS)


def case_reference(name):
    if name not in REFERENCE_VALUES:
        raise ConfigError(f"no reference values for case {name!r}")
    return dict(REFERENCE_VALUES[name])


def build_case(name, order, level=0, resolution=None, solver_options=None,
               threads=0):
    """Instantiate a registered case at one (order, level) cell."""
    if name not in _BUILDERS:
        raise ConfigError(f"unknown case {name!r}; known: {case_names()}")
    built = _BUILDERS[name](order, level, resolution)
    if solver_options is not None:
        built.solver_options = solver_options
    if threads:
        from .solver import SolverOptions

        opts = built.solver_options or SolverOptions()
        opts.threads = threads
        built.solver_options = opts
    return built


def build_benchmark(name, **overrides):
    """The fine (order, resolution) instance acceptance runs use."""
    if name not in BENCHMARK_SETUP:
        raise ConfigError(f"no benchmark setup for case {name!r}")
    setup = dict(BENCHMARK_SETUP[name])
    setup.update(overrides)
    n_steps = setup.pop("n_steps", 10)
    built = build_case(name, order=setup.pop("order"),
                       resolution=setup.pop("resolution"), **setup)
    from dataclasses import replace

    from .solver import SolverOptions

    base = built.solver_options or SolverOptions()
    built.solver_options = replace(base, n_steps=n_steps)
    return built
