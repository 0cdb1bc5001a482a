"""Command-line entry point: run scenarios, compare runs, render figures.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  The
default output root comes from the MANP_OUT_ROOT environment variable when
--out is not given.
"""

import argparse
import hashlib
import json
import os
import sys
import time as _time
from dataclasses import fields

import numpy as np

from . import __version__, theta_net
from .diagnostics import (
    TimeSeriesLog,
    curl_residual,
    error_concentration,
    error_displacement,
    free_energy,
    gauss_residual,
    min_concentration,
    total_mass,
)
from .errors import ConfigError, ManpError, MetadataMismatch
from .grid import CellField, FaceVectorField, write_field_snapshot
from .scenarios import (
    ScenarioConfig,
    build_scenario,
    parse_config_file,
    print_config,
    resolve_config,
)
from .stepper import (
    ThetaStrategy,
    advance,
    advance_1d,
    reconstruct_potential_1d,
)

OUT_ROOT_ENV = "MANP_OUT_ROOT"


def version_string(config):
    """Package version plus a digest of the resolved configuration, so every
    artifact names the exact inputs that produced it.  The output location
    is not part of the digest: two runs of the same numerical setup into
    different directories must produce identical artifacts."""
    lines = [ln for ln in print_config(config).splitlines()
             if not ln.startswith("out ")]
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()[:8]
    return f"{__version__}+cfg{digest}"


class RunResult:
    def __init__(self, config, out_dir, manifest, log, state, strategy):
        self.config = config
        self.out_dir = out_dir
        self.manifest = manifest
        self.log = log
        self.state = state
        self.strategy = strategy


def _displacement_magnitude(state):
    d = state.displacement
    g = state.grid
    if g.periodic:
        cx = 0.5 * (d.x + np.roll(d.x, -1, axis=1))
        cy = 0.5 * (d.y + np.roll(d.y, -1, axis=0))
    else:
        cx = 0.5 * (d.x[:, :-1] + d.x[:, 1:])
        cy = 0.5 * (d.y[:-1, :] + d.y[1:, :])
    return CellField(g, np.hypot(cx, cy))


def _write_snapshots(state, config, out_dir, written):
    step = state.step_index
    t = state.time
    tag = f"step{step:06d}"
    names = []
    for li, sp in enumerate(state.species, start=1):
        path = os.path.join(out_dir, f"c{li}_{tag}.csv")
        write_field_snapshot(path, f"c{li}", t, sp.concentration)
        names.append(path)
    if state.grid.dim == 2:
        path = os.path.join(out_dir, f"dmag_{tag}.csv")
        write_field_snapshot(path, "dmag", t, _displacement_magnitude(state))
        names.append(path)
    else:
        phi = reconstruct_potential_1d(state.displacement, config.eta,
                                       config.phi0_left)
        path = os.path.join(out_dir, f"phi_{tag}.csv")
        write_field_snapshot(path, "phi", t, phi)
        names.append(path)
    written.extend(names)


def _record_step(log, state, config, exact=None):
    # compute every channel first so a mid-computation failure cannot leave
    # the log with ragged columns
    t = state.time
    rec = state.step_record
    row = {}
    for li, sp in enumerate(state.species, start=1):
        row[f"mass_c{li}"] = total_mass(sp.concentration)
        row[f"min_c{li}"] = min_concentration(sp.concentration)
    row["field_max"] = float(np.abs(state.displacement.x).max())
    row["free_energy"] = free_energy(state)
    row["gauss_residual"] = gauss_residual(state)
    row["train_iterations"] = rec.train_iterations
    row["train_loss"] = rec.train_loss
    row["relax_sweeps"] = rec.relax_sweeps
    if state.grid.dim == 2:
        row["curl_residual"] = curl_residual(state)
    if rec.theta_scalar is not None:
        row["theta_scalar"] = rec.theta_scalar
    if exact is not None:
        g = state.grid
        xc, yc = g.cell_centers()
        for li, sp in enumerate(state.species):
            ref = CellField(g, exact.conc(li, xc, yc, t))
            row[f"err_c{li + 1}"] = error_concentration(sp.concentration, ref)
        xfx, xfy = g.xface_positions()
        yfx, yfy = g.yface_positions()
        dx_ref, _ = exact.displacement(xfx, xfy, t)
        _, dy_ref = exact.displacement(yfx, yfy, t)
        ref_d = FaceVectorField(g, dx_ref, dy_ref)
        row["err_d"] = error_displacement(state.displacement, ref_d)
    for name, value in row.items():
        log.append(name, t, value)


def run_scenario(config, progress=False, network_path=None):
    """Execute a scenario to its horizon, writing CSV artifacts and the
    manifest into the output directory.  Returns a RunResult."""
    out_dir = config.out
    if out_dir is None:
        root = os.environ.get(OUT_ROOT_ENV, ".")
        out_dir = os.path.join(root, f"{config.scenario}-{config.theta}")
    os.makedirs(out_dir, exist_ok=True)

    state, exact = build_scenario(config)
    if config.theta == "network":
        if network_path:
            net = theta_net.load_network(network_path)
        else:
            rng = np.random.default_rng(config.seed)
            sizes = [theta_net.N_FEATURES, *config.hidden_layers, 1]
            net = theta_net.MlpNetwork.initialize(sizes, rng)
        strategy = ThetaStrategy("network", net)
    else:
        strategy = ThetaStrategy(config.theta)

    step_fn = advance_1d if config.dim == 1 else advance
    log = TimeSeriesLog()
    written = []
    snapshot_at = {s for s in config.snapshot_steps if s <= config.n_steps}
    phi_rows = []
    per_step = {"train_iterations": [], "train_loss": [], "relax_sweeps": [],
                "train_converged": [], "theta_scalar": []}
    started = _time.time()
    started_utc = _time.strftime("%Y-%m-%dT%H:%M:%SZ", _time.gmtime())

    meta = (f"scenario={config.scenario} seed={config.seed} "
            f"version={version_string(config)} "
            f"free_energy=entropy+field (fixed-charge interaction excluded)")
    ts_path = os.path.join(out_dir, "timeseries.csv")

    n_steps = config.n_steps
    failure = None
    try:
        for k in range(n_steps):
            state = step_fn(state, strategy, config)
            _record_step(log, state, config, exact)
            rec = state.step_record
            per_step["train_iterations"].append(rec.train_iterations)
            per_step["train_loss"].append(rec.train_loss)
            per_step["relax_sweeps"].append(rec.relax_sweeps)
            per_step["train_converged"].append(bool(rec.train_converged))
            per_step["theta_scalar"].append(rec.theta_scalar)
            if state.step_index in snapshot_at:
                _write_snapshots(state, config, out_dir, written)
            if config.dim == 1 and state.step_index % config.phi_series_every == 0:
                phi = reconstruct_potential_1d(state.displacement, config.eta,
                                               config.phi0_left)
                phi_rows.append((state.time, phi.values.copy()))
            if progress and (k + 1) % 50 == 0:
                print(f"  step {k + 1}/{n_steps}  t={state.time:.4f}",
                      file=sys.stderr)
    except ManpError as exc:
        failure = exc

    if log.channels:
        log.to_csv(ts_path, header_meta=meta)
        written.append(ts_path)

    if config.dim == 1:
        phi_path = os.path.join(out_dir, "phi_timeseries.csv")
        with open(phi_path, "w") as fh:
            fh.write(f"# {meta}\n")
            xs = state.grid.cell_centers()
            fh.write("time," + ",".join(repr(float(x)) for x in xs) + "\n")
            for t, vals in phi_rows:
                fh.write(repr(float(t)) + ","
                         + ",".join(repr(float(v)) for v in vals) + "\n")
        written.append(phi_path)

    wall = _time.time() - started
    manifest = {
        "scenario": config.scenario,
        "version": version_string(config),
        "seed": config.seed,
        "config": {f.name: getattr(config, f.name) for f in fields(ScenarioConfig)},
        "started_utc": started_utc,
        "wall_seconds": wall,
        "files": [os.path.basename(p) for p in written],
        "per_step": per_step,
    }
    if failure is not None:
        manifest["error"] = f"{type(failure).__name__}: {failure}"
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)
    if failure is not None:
        # partial artifacts are on disk; surface the failure to the caller
        raise failure

    for p in written:
        if not (os.path.exists(p) and os.path.getsize(p) > 0):
            raise ManpError(f"artifact {p} missing or empty")
    return RunResult(config, out_dir, manifest, log, state, strategy)


# ---------------------------------------------------------------- compare

def load_run(run_dir):
    manifest_path = os.path.join(run_dir, "manifest.json")
    ts_path = os.path.join(run_dir, "timeseries.csv")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        log = TimeSeriesLog.from_csv(ts_path)
    except (OSError, ValueError, ManpError) as exc:
        raise MetadataMismatch(f"{run_dir}: unreadable run artifacts: {exc}")
    return manifest, log


def compare_runs(dir_a, dir_b):
    """Per-channel difference summary of two runs of the same scenario."""
    man_a, log_a = load_run(dir_a)
    man_b, log_b = load_run(dir_b)
    for key in ("scenario",):
        if man_a[key] != man_b[key]:
            raise MetadataMismatch(
                f"scenario mismatch: {man_a[key]} vs {man_b[key]}")
    for key in ("nx", "ny", "dt"):
        if man_a["config"][key] != man_b["config"][key]:
            raise MetadataMismatch(
                f"resolution mismatch on {key}: "
                f"{man_a['config'][key]} vs {man_b['config'][key]}")
    shared = sorted(set(log_a.names()) & set(log_b.names()))
    report = {"scenario": man_a["scenario"], "channels": {}}
    for name in shared:
        a = log_a.column(name)
        b = log_b.column(name)
        n = min(a.size, b.size)
        diff = a[:n] - b[:n]
        report["channels"][name] = {
            "final_a": float(a[n - 1]),
            "final_b": float(b[n - 1]),
            "max_abs_diff": float(np.abs(diff).max()),
        }
    if "err_d" in report["channels"]:
        ch = report["channels"]["err_d"]
        report["final_error_order"] = (
            "a<=b" if ch["final_a"] <= ch["final_b"] else "a>b")
    return report


# -------------------------------------------------------------------- main

def _add_run_args(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--scenario", choices=("robin1d", "analytic2d", "electro2d"))
    p.add_argument("--theta", choices=("zero", "lagged", "implicit-lagged",
                                       "network"))
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--T", dest="horizon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--loss-variant", dest="loss_variant",
                   choices=("energy", "curl"))
    p.add_argument("--snapshot-steps", dest="snapshot_steps",
                   help="comma-separated step indices")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration and exit")
    p.add_argument("--save-network", help="write the trained network here")
    p.add_argument("--load-network", help="warm-start from a checkpoint")
    p.add_argument("--quiet", action="store_true")


def _resolve_from_args(args):
    overrides = {}
    if args.config:
        overrides.update(parse_config_file(args.config))
    scenario = args.scenario or overrides.pop("scenario", None)
    if scenario is None:
        raise ConfigError("no scenario given (use --scenario or a config file)")
    for key in ("theta", "nx", "ny", "dt", "horizon", "steps", "seed", "out",
                "loss_variant"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.snapshot_steps is not None:
        overrides["snapshot_steps"] = tuple(
            int(t) for t in args.snapshot_steps.split(",") if t.strip())
    return resolve_config(scenario, **overrides)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="manp",
        description="Ion electrodiffusion solver with dynamic displacement "
                    "update and divergence-free dummy-field closures")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario and write artifacts")
    _add_run_args(p_run)
    p_cmp = sub.add_parser("compare", help="compare two run directories")
    p_cmp.add_argument("run_a")
    p_cmp.add_argument("run_b")
    p_rep = sub.add_parser("report", help="render figures for a run directory")
    p_rep.add_argument("run_dir")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            config = _resolve_from_args(args)
            if args.print_config:
                sys.stdout.write(print_config(config))
                return 0
            result = run_scenario(config, progress=not args.quiet,
                                  network_path=args.load_network)
            if args.save_network:
                if result.strategy.network is None:
                    raise ConfigError("--save-network needs --theta network")
                theta_net.save_network(result.strategy.network,
                                       args.save_network)
            print(f"wrote {len(result.manifest['files'])} artifacts to "
                  f"{result.out_dir}")
            return 0
        if args.command == "compare":
            report = compare_runs(args.run_a, args.run_b)
            json.dump(report, sys.stdout, indent=1)
            sys.stdout.write("\n")
            return 0
        if args.command == "report":
            from .report import render_run
            figures = render_run(args.run_dir)
            print(f"rendered {len(figures)} figures under "
                  f"{os.path.join(args.run_dir, 'figures')}")
            return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except MetadataMismatch as exc:
        print(f"comparison error: {exc}", file=sys.stderr)
        return 2
    except ManpError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
