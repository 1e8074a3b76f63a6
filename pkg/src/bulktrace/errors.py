"""Error measures over all level sets and the refinement-study driver.

All integrals run on the undeformed mesh: the deformed level-set measure
pulls back through the stretch, so no deformed-configuration quadrature is
ever needed.  The residual measure differentiates the equilibrium pointwise
and therefore needs second derivatives; it is summed element by element so
the inter-element jumps of C0 shape functions never enter.
"""

import csv
import json
import os

import numpy as np

from .exceptions import ConfigError
from .levelset import LevelSetField
from .mechanics import kinematics, pk2
from .tdc import qp_batches


def _as_field(mesh, field):
    if isinstance(field, LevelSetField):
        return field
    return LevelSetField(mesh, analytic=field)


def _grad_u_batch(mesh, batch, u):
    conn = mesh.conn[batch.elements]
    ue = u.reshape(-1, mesh.dim)[conn]
    return ue, np.einsum("cnm,cqnd->cqmd", ue, batch.gradN)


def integrated_levelsets(mesh, field, u=None, degree=0):
    """Total deformed measure of all level sets, pulled back to the bulk.

    With u = None (or zero) this is the undeformed measure of the stack.
    """
    field = _as_field(mesh, field)
    total = 0.0
    for b in qp_batches(mesh, field.nodal, degree):
        if u is None:
            lam = 1.0
        else:
            _, gu = _grad_u_batch(mesh, b, np.asarray(u, dtype=float))
            lam = kinematics(gu, b.gphi, check=False).stretch
        total += float(np.sum(b.wmod * lam))
    return total


def stored_energy(mesh, field, u, mat, degree=0, form="material"):
    """Stored SVK energy summed over all level sets.

    form "material" integrates the strain-stress pairing on the undeformed
    stack, form "spatial" the Almansi-Cauchy pairing on the deformed one;
    the two agree to round-off and the pair is kept as a cross-check.
    """
    if form not in ("material", "spatial"):
        raise ConfigError(f"unknown energy form {form!r}")
    field = _as_field(mesh, field)
    u = np.asarray(u, dtype=float)
    total = 0.0
    for b in qp_batches(mesh, field.nodal, degree):
        _, gu = _grad_u_batch(mesh, b, u)
        st = kinematics(gu, b.gphi, check=False)
        S = pk2(st, mat)
        if form == "material":
            dens = 0.5 * np.einsum("cqij,cqij->cq", st.E_tang, S)
        else:
            sig = np.einsum("cqik,cqkl,cqjl->cqij", st.F_surf, S, st.F_surf)
            sig /= st.stretch[..., None, None]
            dens = 0.5 * np.einsum("cqij,cqij->cq", st.e_tang, sig) * st.stretch
        total += float(np.sum(b.wmod * dens))
    return total


def _phi_hessian(field, batch, source):
    if source == "interpolant":
        return batch.Hphi
    if source == "analytic":
        if field.analytic is None or field.analytic.hess is None:
            raise ConfigError("analytic Hessian requested but field has none")
        X = batch.X.reshape(-1, batch.X.shape[-1])
        return field.analytic.hess(X).reshape(batch.Hphi.shape)
    raise ConfigError(f"unknown Hessian source {source!r}")


def residual_error(mesh, field, u, mat, body_force=None, degree=0,
                   hessian_source="analytic"):
    """Element-wise equilibrium residual of the converged state.

    body_force is the dead load per unit undeformed level-set measure (same
    convention as the solver), a vector or callable of X; the string "self"
    balances the divergence term pointwise and must give zero.  Needs
    second derivatives, so order 1 is rejected.  hessian_source picks where
    the level-set curvature comes from: the exact field ("analytic",
    default, more accurate) or its nodal interpolant ("interpolant").
    """
    if mesh.order < 2:
        raise ConfigError("residual error needs order >= 2 elements")
    field = _as_field(mesh, field)
    u = np.asarray(u, dtype=float)
    total = 0.0
    for b in qp_batches(mesh, field.nodal, degree, hessian=True):
        ue, gu = _grad_u_batch(mesh, b, u)
        st = kinematics(gu, b.gphi, check=False)
        S = pk2(st, mat)
        F = st.F_surf
        P, N, gn = b.P, b.N, b.gnorm
        Hphi = _phi_hessian(field, b, hessian_source)
        # spatial derivative of the projector through the normalized gradient
        dN = np.einsum("cqim,cqmk->cqik", P, Hphi) / gn[..., None, None]
        dP = -np.einsum("cqik,cqj->cqijk", dN, N) - np.einsum("cqi,cqjk->cqijk", N, dN)
        hess_u = np.einsum("cni,cqnjk->cqijk", ue, b.hessN)
        dF = np.einsum("cqimk,cqmj->cqijk", hess_u, P) \
            + np.einsum("cqim,cqmjk->cqijk", gu, dP)
        dE = 0.5 * (np.einsum("cqmik,cqmj->cqijk", dF, F)
                    + np.einsum("cqmi,cqmjk->cqijk", F, dF))
        E = st.E_dir
        dEt = np.einsum("cqimk,cqmn,cqnj->cqijk", dP, E, P) \
            + np.einsum("cqim,cqmnk,cqnj->cqijk", P, dE, P) \
            + np.einsum("cqim,cqmn,cqnjk->cqijk", P, E, dP)
        trEt = np.einsum("cqii->cq", st.E_tang)
        trdEt = np.einsum("cqiik->cqk", dEt)
        dS = mat.lam * (np.einsum("cqk,cqij->cqijk", trdEt, P)
                        + trEt[..., None, None, None] * dP) + 2.0 * mat.mu * dEt
        dK = np.einsum("cqimk,cqmj->cqijk", dF, S) \
            + np.einsum("cqim,cqmjk->cqijk", F, dS)
        divK = np.einsum("cqijk,cqkj->cqi", dK, P)
        if body_force is None:
            fb = 0.0
        elif isinstance(body_force, str) and body_force == "self":
            fb = -divK
        elif callable(body_force):
            fb = np.asarray(body_force(b.X.reshape(-1, mesh.dim)), dtype=float)
            fb = fb.reshape(divK.shape)
        else:
            fb = np.broadcast_to(np.asarray(body_force, dtype=float), divK.shape)
        r = (divK + fb) / st.stretch[..., None]
        total += float(np.sum(b.wmod * st.stretch * np.einsum("cqi,cqi->cq", r, r)))
    return float(np.sqrt(total))


def _fit_slope(h, err, n_fit=3):
    """Least-squares log-log slope over the finest n_fit levels."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    keep = err > 0
    h, err = h[keep], err[keep]
    if len(h) < 2:
        return float("nan")
    k = min(n_fit, len(h))
    lh, le = np.log(h[-k:]), np.log(err[-k:])
    A = np.stack([lh, np.ones_like(lh)], axis=1)
    slope, _ = np.linalg.lstsq(A, le, rcond=None)[0]
    return float(slope)


def convergence_study(case, orders=None, levels=None, out_dir=None,
                      n_steps=None, solver_options=None, threads=0):
    """Refinement study for a registered case; returns the rate table.

    orders and levels default to the ladder registered for the case.
    levels is one list shared by every order or a dict order -> list, and
    each entry is a refinement-level int or an explicit mesh resolution
    (the affordable finest mesh shrinks as the order grows, and the 3D
    cases need rungs between the power-of-two levels).  n_steps, when
    given, overrides the load-step count on top of the case's own solver
    options.  Runs every cell, records the three error measures, and fits
    log-log slopes over the finest three levels.  A failed solve marks the
    cell instead of aborting the study.  With out_dir, writes
    convergence.csv, convergence.json, and the log-log figures there.
    """
    from dataclasses import replace

    from .cases import STUDY_SETUP, build_case, case_reference
    from .solver import SolverOptions

    if orders is None or levels is None:
        if case not in STUDY_SETUP:
            raise ConfigError(f"no study ladder for case {case!r}")
        setup = STUDY_SETUP[case]
        if orders is None:
            orders = setup["orders"]
        if levels is None:
            levels = setup["levels"]
            if n_steps is None:
                n_steps = setup.get("n_steps")

    ref = case_reference(case)
    rows = []
    for p in orders:
        p_levels = levels[p] if isinstance(levels, dict) else levels
        series = []
        for idx, spec in enumerate(p_levels):
            cell = {"p": int(p), "level": int(idx),
                    "spec": (int(spec) if isinstance(spec, (int, np.integer))
                             else list(spec))}
            try:
                if isinstance(spec, (int, np.integer)):
                    kw = {"level": int(spec)}
                else:
                    kw = {"resolution": tuple(spec)}
                built = build_case(case, order=p,
                                   solver_options=solver_options,
                                   threads=threads, **kw)
                if n_steps is not None:
                    base = built.solver_options or SolverOptions()
                    built.solver_options = replace(base, n_steps=int(n_steps))
                sol = built.solve()
                D = integrated_levelsets(built.mesh, built.field, sol.u)
                e = stored_energy(built.mesh, built.field, sol.u, built.mat)
                cell.update(
                    h=built.mesh.h_max(),
                    n_DOF=built.mesh.n_nodes * built.mesh.dim,
                    eps_phi=abs(D - ref["D"]),
                    eps_e=abs(e - ref["e"]),
                    eps_res=(residual_error(built.mesh, built.field, sol.u,
                                            built.mat, built.body_force)
                             if p >= 2 else float("nan")),
                    D=D, e=e, failed=False,
                )
            except Exception as exc:  # noqa: BLE001 - cell failure is data
                cell.update(h=float("nan"), n_DOF=0, eps_phi=float("nan"),
                            eps_e=float("nan"), eps_res=float("nan"),
                            D=float("nan"), e=float("nan"), failed=True,
                            error=f"{type(exc).__name__}: {exc}")
            series.append(cell)
        ok = [c for c in series if not c["failed"]]
        hs = [c["h"] for c in ok]
        slope_phi = _fit_slope(hs, [c["eps_phi"] for c in ok])
        slope_e = _fit_slope(hs, [c["eps_e"] for c in ok])
        slope_res = (_fit_slope(hs, [c["eps_res"] for c in ok])
                     if p >= 2 else float("nan"))
        for c in series:
            c["slope_phi"] = slope_phi
            c["slope_e"] = slope_e
            c["slope_res"] = slope_res
        rows.extend(series)
    table = {"case": case, "reference": ref, "rows": rows,
             "slopes": {str(p): {"phi": rows_for_p[-1]["slope_phi"],
                                 "e": rows_for_p[-1]["slope_e"],
                                 "res": rows_for_p[-1]["slope_res"]}
                        for p in orders
                        for rows_for_p in [[r for r in rows if r["p"] == p]]}}
    if out_dir:
        write_rate_table(table, out_dir)
        plot_rate_table(table, out_dir)
    return table


_CSV_COLUMNS = ["p", "level", "h", "n_DOF", "eps_phi", "eps_e", "eps_res",
                "slope_phi", "slope_e", "slope_res"]


def write_rate_table(table, out_dir):
    """Emit convergence.csv and convergence.json into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "convergence.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in table["rows"]:
            w.writerow({k: row.get(k) for k in _CSV_COLUMNS})
    with open(os.path.join(out_dir, "convergence.json"), "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path


_RATE_FIGURES = (("eps_phi", "level-set measure error", "convergence_phi.png"),
                 ("eps_e", "energy error", "convergence_e.png"),
                 ("eps_res", "equilibrium residual", "convergence_res.png"))


def plot_rate_table(table, out_dir):
    """Render one log-log error-vs-h figure per error measure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    rows = [r for r in table["rows"] if not r.get("failed")]
    paths = []
    for key, label, fname in _RATE_FIGURES:
        fig, ax = plt.subplots(figsize=(4.8, 3.6))
        drew = False
        for p in sorted({r["p"] for r in rows}):
            rp = [r for r in rows if r["p"] == p]
            h = np.array([r["h"] for r in rp])
            err = np.array([r[key] for r in rp])
            keep = np.isfinite(err) & (err > 0)
            if not keep.any():
                continue
            slope = rp[-1][key.replace("eps", "slope")]
            ax.loglog(h[keep], err[keep], marker="o", ms=4,
                      label=f"p={p} (slope {slope:.2f})")
            drew = True
        if not drew:
            plt.close(fig)
            continue
        ax.set_xlabel("h")
        ax.set_ylabel(label)
        ax.set_title(f"{table['case']}: {label} vs h")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, fname)
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths
