"""Command-line experiment orchestration.

Subcommands form a pipeline over one shared INI config:

  gen-mesh      synthesize/load the fine and coarse meshes
  preprocess    eigenbasis, lead fields, conduction tensors (cached)
  ground-truth  reference ECG + truth metadata
  run           one SF or MF optimization run (audit CSV, summary, SVG plots)
  benchmark     matched-seed SF vs MF study with aggregate report
  loss-map      exhaustive low-fidelity loss landscape + global-min check

Each command ensures its prerequisites (idempotently, keyed on the config
hash and mesh content) so any entry point works on a fresh output
directory. Every artifact carries the config hash and seed in its header or
metadata. Exit codes: 0 success, 1 configuration error, 2 compute error,
3 partial benchmark failure.
"""

from __future__ import annotations

import hashlib
import io
import json
import sys
from pathlib import Path

import click
import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import bo as bo_mod  # noqa: E402
from .config import ConfigError, load_config, write_default_config  # noqa: E402
from .ecg import ActionPotentialParams, EcgTrace  # noqa: E402
from .fem import (  # noqa: E402
    EigenBasis,
    assemble_mass,
    assemble_stiffness,
    compute_eigenbasis,
    default_n_eig,
)
from .eikonal import geodesic_distances  # noqa: E402
from .mesh import (  # noqa: E402
    coarsen_mesh,
    generate_synthetic_geometry,
    load_mesh,
    nearest_node,
    save_mesh,
)
from .pipeline import (  # noqa: E402
    LocalizationProblem,
    build_pipeline,
    make_reference,
)

# A malformed flag is a configuration problem; report it with exit code 1
# (click's default usage-error code collides with our compute-error code).
click.exceptions.UsageError.exit_code = 1


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_cfg(config_path):
    try:
        return load_config(config_path)
    except ConfigError as exc:
        _fail(1, str(exc))


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _stamp(cfg, seed=None):
    s = cfg.seed if seed is None else seed
    return f"# config={cfg.config_hash()} seed={s}\n"


def _svg_metadata(cfg, seed=None):
    s = cfg.seed if seed is None else seed
    return {"Title": f"config={cfg.config_hash()} seed={s}", "Date": None}


def _write_json(path, cfg, payload, seed=None):
    payload = {"config_hash": cfg.config_hash(),
               "seed": cfg.seed if seed is None else seed, **payload}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# ----------------------------------------------------------------------
# artifact construction (idempotent stages)


def _mesh_paths(out):
    return out / "hf_mesh.vtk", out / "lf_mesh.vtk"


def _mesh_fmt(path):
    return "vtk-legacy-ascii" if str(path).endswith(".vtk") else "off"


def _ensure_meshes(cfg, out, force=False):
    hf_path, lf_path = _mesh_paths(out)
    if cfg.hf_mesh_path:
        hf = load_mesh(cfg.hf_mesh_path, _mesh_fmt(cfg.hf_mesh_path))
        lf = (load_mesh(cfg.lf_mesh_path, _mesh_fmt(cfg.lf_mesh_path))
              if cfg.lf_mesh_path
              else coarsen_mesh(hf, cfg.lf_coarsen_factor))
        return hf, lf, False
    if hf_path.exists() and lf_path.exists() and not force:
        return (load_mesh(hf_path, "vtk-legacy-ascii"),
                load_mesh(lf_path, "vtk-legacy-ascii"), False)
    radii = cfg.radii if cfg.kind == "ellipsoid-shell" else cfg.radii[:1]
    hf = generate_synthetic_geometry(cfg.kind, radii, cfg.subdivision,
                                     cfg.fiber_rule, cfg.fiber_direction)
    lf = coarsen_mesh(hf, cfg.lf_coarsen_factor)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(hf, hf_path, fmt="vtk-legacy-ascii")
    save_mesh(lf, lf_path, fmt="vtk-legacy-ascii")
    return hf, lf, True


def _pipelines(cfg, hf_mesh, lf_mesh):
    ap = ActionPotentialParams(cfg.v0, cfg.v1, cfg.upstroke_width)
    hf = build_pipeline(hf_mesh, cfg.v_fiber, cfg.v_cross,
                        cfg.sigma_l, cfg.sigma_t, ap)
    lf = build_pipeline(lf_mesh, cfg.v_fiber, cfg.v_cross,
                        cfg.sigma_l, cfg.sigma_t, ap)
    return hf, lf


def _ensure_preprocess(cfg, out, force=False, echo=click.echo):
    """Eigenbasis + per-fidelity lead fields/tensors, cached on disk."""
    hf_mesh, lf_mesh, _ = _ensure_meshes(cfg, out, force=False)
    hf_path, lf_path = _mesh_paths(out)
    manifest_path = out / "preprocess_manifest.json"
    basis_path = out / "hf_basis.bin"
    npz_path = out / "forward_artifacts.npz"
    key = {
        "config_hash": cfg.config_hash(),
        "hf_mesh": _file_digest(hf_path) if hf_path.exists() else "external",
        "lf_mesh": _file_digest(lf_path) if lf_path.exists() else "external",
    }
    if (not force and manifest_path.exists() and basis_path.exists()
            and npz_path.exists()):
        manifest = json.loads(manifest_path.read_text())
        if {k: manifest.get(k) for k in key} == key:
            echo("preprocess: up-to-date")
            return hf_mesh, lf_mesh, EigenBasis.load(basis_path)
    out.mkdir(parents=True, exist_ok=True)
    warnings = []
    n_eig = cfg.n_eig or default_n_eig(hf_mesh.n_vertices)
    if n_eig > hf_mesh.n_vertices:
        warnings.append(
            f"n_eig {n_eig} exceeds node count; clamped to {hf_mesh.n_vertices}"
        )
        n_eig = hf_mesh.n_vertices
    A = assemble_stiffness(hf_mesh)
    M = assemble_mass(hf_mesh)
    basis = compute_eigenbasis(A, M, n_eig)
    basis.save(basis_path)
    hf, lf = _pipelines(cfg, hf_mesh, lf_mesh)
    np.savez(
        npz_path,
        hf_lead_fields=hf.leads.fields, hf_electrodes=hf.leads.electrodes,
        hf_tensors=hf.solver.tensors.tensors,
        hf_conductivity=hf.conductivity.tensors, hf_projection=hf.projection,
        lf_lead_fields=lf.leads.fields, lf_electrodes=lf.leads.electrodes,
        lf_tensors=lf.solver.tensors.tensors,
        lf_conductivity=lf.conductivity.tensors, lf_projection=lf.projection,
        config_hash=np.bytes_(cfg.config_hash().encode()),
    )
    _write_json(manifest_path, cfg, {**key, "n_eig": n_eig,
                                     "warnings": warnings})
    for w in warnings:
        echo(f"warning: {w}")
    echo(f"preprocess: wrote eigenbasis ({n_eig} modes) and forward artifacts")
    return hf_mesh, lf_mesh, basis


def _truth_node(cfg, hf_mesh):
    if cfg.truth_point:
        node = nearest_node(hf_mesh, np.asarray(cfg.truth_point))
        snap = float(np.linalg.norm(
            hf_mesh.vertices[node] - np.asarray(cfg.truth_point)))
        return int(node), snap
    if not 0 <= cfg.truth_node < hf_mesh.n_vertices:
        raise ConfigError(f"truth node {cfg.truth_node} outside the mesh")
    return int(cfg.truth_node), 0.0


def _ensure_reference(cfg, out, force=False, echo=click.echo):
    hf_mesh, lf_mesh, basis = _ensure_preprocess(cfg, out, force, echo=echo)
    ref_path = out / "reference.csv"
    truth_path = out / "truth.json"
    if ref_path.exists() and truth_path.exists() and not force:
        truth = json.loads(truth_path.read_text())
        if truth.get("config_hash") == cfg.config_hash():
            echo("ground-truth: up-to-date")
            return hf_mesh, lf_mesh, basis, EcgTrace.load_csv(ref_path), truth
    hf, lf = _pipelines(cfg, hf_mesh, lf_mesh)
    node, snap = _truth_node(cfg, hf_mesh)
    ref = make_reference(hf, node, dt=cfg.dt, margin=cfg.time_margin)
    ref_path.write_text(_stamp(cfg) + ref.to_csv())
    problem = LocalizationProblem(hf, ref, basis, node, lf)
    self_loss = problem.loss_hf(node)
    lf_trace = lf.ecg(problem.lf_node_for(node), ref.times)
    cors = [float(np.corrcoef(lf_trace.values[:, k], ref.values[:, k])[0, 1])
            for k in range(ref.n_leads)]
    truth = {
        "truth_node": node, "snap_distance_mm": snap,
        "self_loss": self_loss, "lead_correlations": cors,
        "n_time_steps": len(ref.times),
    }
    _write_json(truth_path, cfg, truth)
    echo(f"ground-truth: node {node} (snap {snap:.3f} mm), "
         f"self-loss {self_loss:.3e}, min lead correlation {min(cors):.4f}")
    return hf_mesh, lf_mesh, basis, ref, {"config_hash": cfg.config_hash(),
                                          **truth}


def _build_problem(cfg, out, force=False, echo=click.echo):
    hf_mesh, lf_mesh, basis, ref, truth = _ensure_reference(
        cfg, out, force, echo=echo)
    hf, lf = _pipelines(cfg, hf_mesh, lf_mesh)
    return LocalizationProblem(hf, ref, basis, truth["truth_node"], lf)


def _bo_config(cfg, seed):
    return bo_mod.BoConfig(
        n_init=cfg.n_init, n_init_hf=cfg.n_init_hf, n_init_lf=cfg.n_init_lf,
        max_hf_evals=cfg.max_hf_evals, beta=cfg.beta,
        geo_tol_fraction=cfg.geo_tol_fraction,
        lf_cost_ratio=cfg.lf_cost_ratio, seed=seed,
        fit_restarts=cfg.fit_restarts,
    )


def _plot_loss_iterations(state, path, cfg, seed):
    fig, ax = plt.subplots(figsize=(6, 4))
    for fid, color in (("low", "tab:orange"), ("high", "tab:blue")):
        pts = [(i, r.loss) for i, r in enumerate(state.records)
               if r.fidelity == fid]
        if pts:
            ax.scatter(*zip(*pts), s=18, c=color, label=f"{fid} fidelity")
    ax.set_xlabel("evaluation index")
    ax.set_ylabel("ECG mismatch loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_svg_metadata(cfg, seed))
    plt.close(fig)


def _plot_loss_surface(problem, state, path, cfg, seed):
    """Flat 2D snapshot: nodes on the two principal axes, colored by the
    surrogate posterior mean (observed losses when no model was fit)."""
    mesh = problem.hf.mesh
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    _, _, basis_vecs = np.linalg.svd(v, full_matrices=False)
    uv = v @ basis_vecs[:2].T
    fig, ax = plt.subplots(figsize=(6, 5))
    if state.model is not None:
        from .gp import GpModel, posterior
        from .mfgp import mf_posterior
        if isinstance(state.model, GpModel):
            mu, _ = posterior(state.model, np.arange(mesh.n_vertices))
        else:
            mu, _ = mf_posterior(state.model, np.arange(mesh.n_vertices))
        sc = ax.scatter(uv[:, 0], uv[:, 1], c=mu, s=6, cmap="viridis")
        fig.colorbar(sc, ax=ax, label="posterior mean loss")
    else:
        ax.scatter(uv[:, 0], uv[:, 1], c="lightgray", s=6)
    hf_nodes = [r.node for r in state.records if r.fidelity == "high"]
    ax.scatter(uv[hf_nodes, 0], uv[hf_nodes, 1], marker="x", c="red", s=30,
               label="HF evaluations")
    if problem.truth_node is not None:
        ax.scatter(*uv[problem.truth_node], marker="*", c="gold",
                   edgecolors="black", s=180, label="truth")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_svg_metadata(cfg, seed))
    plt.close(fig)


def _execute_run(cfg, out, problem, mode, seed, echo=click.echo, plots=True):
    bo_cfg = _bo_config(cfg, seed)
    runner = bo_mod.run_sf_bo if mode == "sf" else bo_mod.run_mf_bo
    state = runner(problem, bo_cfg)
    audit_path = out / f"audit_{mode}_seed{seed}.csv"
    audit_path.write_text(_stamp(cfg, seed)
                          + state.audit_csv(problem.hf.mesh))
    summary = {
        "mode": mode, "converged": state.converged,
        "n_hf_evals": state.n_hf_evals,
        "n_acquisitions": state.n_acquisitions,
        "total_cost": state.total_cost, "best_node": int(state.best_node),
        "final_geodesic_error_mm": problem.geodesic_error(state.best_node),
        "stop_reason": state.stop_reason,
        "n_records": len(state.records),
    }
    _write_json(out / f"summary_{mode}_seed{seed}.json", cfg, summary,
                seed=seed)
    if plots:
        _plot_loss_iterations(
            state, out / f"loss_iterations_{mode}_seed{seed}.svg", cfg, seed)
        _plot_loss_surface(
            problem, state, out / f"loss_surface_{mode}_seed{seed}.svg",
            cfg, seed)
    echo(f"run {mode} seed {seed}: converged={state.converged} "
         f"hf_evals={state.n_hf_evals} cost={state.total_cost:.2f} "
         f"stop={state.stop_reason}")
    return state, summary


# ----------------------------------------------------------------------
# commands


@click.group()
def main():
    """Earliest-activation-site localization experiments."""


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(),
                     default=None, help="INI experiment config.")(f)
    f = click.option("--out", "out_dir", type=click.Path(), default=None,
                     help="Output directory (default from config).")(f)
    return f


def _resolve(config_path, out_dir):
    cfg = _load_cfg(config_path)
    out = Path(out_dir) if out_dir else Path(cfg.output_dir)
    return cfg, out


@main.command("init-config")
@click.argument("path", type=click.Path())
def cmd_init_config(path):
    """Write a template config file with all defaults."""
    write_default_config(path)
    click.echo(f"wrote {path}")


@main.command("gen-mesh")
@_common
@click.option("--force", is_flag=True, help="Regenerate existing meshes.")
def cmd_gen_mesh(config_path, out_dir, force):
    """Generate (or import) the fine and coarse experiment meshes."""
    cfg, out = _resolve(config_path, out_dir)
    try:
        hf, lf, wrote = _ensure_meshes(cfg, out, force=force)
    except Exception as exc:
        _fail(2, f"mesh generation failed: {exc}")
    status = "wrote" if wrote else "kept"
    click.echo(f"gen-mesh: {status} HF {hf.n_vertices} nodes / "
               f"LF {lf.n_vertices} nodes in {out}")


@main.command("preprocess")
@_common
@click.option("--force", is_flag=True, help="Recompute cached artifacts.")
def cmd_preprocess(config_path, out_dir, force):
    """Compute and persist the eigenbasis, lead fields, and tensors."""
    cfg, out = _resolve(config_path, out_dir)
    try:
        _ensure_preprocess(cfg, out, force=force)
    except ConfigError as exc:
        _fail(1, str(exc))
    except Exception as exc:
        _fail(2, f"preprocess failed: {exc}")


@main.command("ground-truth")
@_common
@click.option("--force", is_flag=True, help="Recompute the reference.")
def cmd_ground_truth(config_path, out_dir, force):
    """Synthesize the reference ECG at the configured truth site."""
    cfg, out = _resolve(config_path, out_dir)
    try:
        _ensure_reference(cfg, out, force=force)
    except ConfigError as exc:
        _fail(1, str(exc))
    except Exception as exc:
        _fail(2, f"ground-truth failed: {exc}")


@main.command("run")
@_common
@click.option("--mode", type=click.Choice(["sf", "mf"]), default="sf",
              show_default=True)
@click.option("--seed", type=int, default=None,
              help="Run seed (default from config).")
@click.option("--force", is_flag=True, help="Recompute cached prerequisites.")
def cmd_run(config_path, out_dir, mode, seed, force):
    """Execute one optimization run and write its audit trail."""
    cfg, out = _resolve(config_path, out_dir)
    seed = cfg.seed if seed is None else seed
    try:
        problem = _build_problem(cfg, out, force=force)
        _execute_run(cfg, out, problem, mode, seed)
    except ConfigError as exc:
        _fail(1, str(exc))
    except Exception as exc:
        _fail(2, f"run failed: {exc}")


@main.command("benchmark")
@_common
@click.option("--force", is_flag=True, help="Recompute cached prerequisites.")
def cmd_benchmark(config_path, out_dir, force):
    """Matched-seed SF vs MF study over the configured seed list."""
    cfg, out = _resolve(config_path, out_dir)
    if len(cfg.seeds) < 2:
        _fail(1, "benchmark needs a seed list of length >= 2")
    try:
        problem = _build_problem(cfg, out, force=force)
    except ConfigError as exc:
        _fail(1, str(exc))
    except Exception as exc:
        _fail(2, f"benchmark setup failed: {exc}")
    rows = []
    failures = []
    for seed in cfg.seeds:
        for mode in ("sf", "mf"):
            try:
                state, summary = _execute_run(cfg, out, problem, mode, seed,
                                              plots=False)
            except Exception as exc:
                failures.append((mode, seed, str(exc)))
                click.echo(f"run {mode} seed {seed} FAILED: {exc}", err=True)
                continue
            rows.append((mode, seed, summary))
    csv_path = out / "benchmark.csv"
    with open(csv_path, "w") as f:
        f.write(_stamp(cfg))
        f.write("mode,seed,converged,n_hf_evals,n_acquisitions,"
                "total_cost,final_geodesic_error_mm\n")
        for mode, seed, s in rows:
            f.write(f"{mode},{seed},{int(s['converged'])},{s['n_hf_evals']},"
                    f"{s['n_acquisitions']},{repr(float(s['total_cost']))},"
                    f"{repr(float(s['final_geodesic_error_mm']))}\n")

    def agg(mode):
        costs = np.array([s["total_cost"] for m, _, s in rows if m == mode])
        conv = np.array([s["converged"] for m, _, s in rows if m == mode])
        q1, q3 = np.percentile(costs, [25, 75]) if len(costs) else (0, 0)
        return {
            "runs": int(len(costs)),
            "converged": int(conv.sum()),
            "median_cost": float(np.median(costs)) if len(costs) else None,
            "iqr_cost": float(q3 - q1) if len(costs) else None,
        }

    report = {"sf": agg("sf"), "mf": agg("mf"),
              "failures": [{"mode": m, "seed": s, "error": e}
                           for m, s, e in failures]}
    _write_json(out / "benchmark_summary.json", cfg, report)
    fig, ax = plt.subplots(figsize=(5, 4))
    data = [
        [s["total_cost"] for m, _, s in rows if m == mode]
        for mode in ("sf", "mf")
    ]
    ax.boxplot(data, tick_labels=["single fidelity", "multi fidelity"])
    ax.set_ylabel("total cost (HF units)")
    fig.tight_layout()
    fig.savefig(out / "benchmark_box.svg", metadata=_svg_metadata(cfg))
    plt.close(fig)
    for mode in ("sf", "mf"):
        a = report[mode]
        click.echo(f"{mode}: {a['converged']}/{a['runs']} converged, "
                   f"median cost {a['median_cost']}, IQR {a['iqr_cost']}")
    if failures:
        _fail(3, f"{len(failures)} of {2 * len(cfg.seeds)} runs failed")


@main.command("loss-map")
@_common
@click.option("--mode", type=click.Choice(["sf", "mf"]), default="sf",
              show_default=True, help="Run summary to certify against.")
@click.option("--seed", type=int, default=None,
              help="Run seed to certify (default from config).")
@click.option("--force", is_flag=True, help="Recompute the map.")
def cmd_loss_map(config_path, out_dir, mode, seed, force):
    """Exhaustive low-fidelity loss landscape; certifies a run's optimum."""
    cfg, out = _resolve(config_path, out_dir)
    seed = cfg.seed if seed is None else seed
    try:
        problem = _build_problem(cfg, out, force=force)
        lf_mesh = problem.lf.mesh
        map_path = out / "loss_map.csv"
        losses = None
        if map_path.exists() and not force:
            text = map_path.read_text()
            if f"config={cfg.config_hash()}" in text.splitlines()[0]:
                body = "".join(ln for ln in text.splitlines(keepends=True)
                               if not ln.startswith("#"))
                data = np.genfromtxt(io.StringIO(body), delimiter=",",
                                     names=True)
                losses = np.asarray(data["loss"], dtype=float)
                click.echo("loss-map: up-to-date")
        if losses is None:
            losses = np.array([
                problem.lf.loss(i, problem.reference)
                for i in range(lf_mesh.n_vertices)
            ])
            with open(map_path, "w") as f:
                f.write(_stamp(cfg, seed=seed))
                f.write("node_id,x,y,z,loss\n")
                for i, loss in enumerate(losses):
                    x, y, z = lf_mesh.vertices[i]
                    f.write(f"{i},{repr(float(x))},{repr(float(y))},"
                            f"{repr(float(z))},{repr(float(loss))}\n")
            fig, ax = plt.subplots(figsize=(6, 5))
            v = lf_mesh.vertices - lf_mesh.vertices.mean(axis=0)
            _, _, pcs = np.linalg.svd(v, full_matrices=False)
            uv = v @ pcs[:2].T
            sc = ax.scatter(uv[:, 0], uv[:, 1], c=np.log10(losses + 1e-30),
                            s=10, cmap="viridis")
            fig.colorbar(sc, ax=ax, label="log10 LF loss")
            ax.set_aspect("equal")
            fig.tight_layout()
            fig.savefig(out / "loss_map.svg",
                        metadata=_svg_metadata(cfg, seed))
            plt.close(fig)
            click.echo(f"loss-map: {lf_mesh.n_vertices} LF nodes evaluated")
        argmin_lf = int(np.argmin(losses))
        payload = {"lf_argmin_node": argmin_lf,
                   "lf_argmin_loss": float(losses[argmin_lf])}
        summary_path = out / f"summary_{mode}_seed{seed}.json"
        if summary_path.exists():
            summary = json.loads(summary_path.read_text())
            best = int(summary["best_node"])
            argmin_pos = lf_mesh.vertices[argmin_lf]
            argmin_hf = nearest_node(problem.hf.mesh, argmin_pos)
            geo = float(geodesic_distances(problem.hf.mesh, best)[argmin_hf])
            tol = cfg.geo_tol_fraction * problem.hf.mesh.diameter
            certified = (problem.lf_node_for(best) == argmin_lf
                         or geo <= tol)
            payload.update({
                "certified_mode": mode, "certified_seed": seed,
                "best_node": best,
                "distance_to_lf_argmin_mm": geo, "tolerance_mm": tol,
                "global_minimum_certified": bool(certified),
            })
            click.echo(f"loss-map: run {mode} seed {seed} "
                       f"{'CERTIFIED' if certified else 'NOT certified'} "
                       f"(distance {geo:.2f} mm, tol {tol:.2f} mm)")
        _write_json(out / f"loss_map_cert_{mode}_seed{seed}.json", cfg,
                    payload, seed=seed)
    except ConfigError as exc:
        _fail(1, str(exc))
    except Exception as exc:
        _fail(2, f"loss-map failed: {exc}")


if __name__ == "__main__":
    main()
