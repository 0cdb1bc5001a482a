"""Render run artifacts (time-series CSV, field snapshots) to PNG figures."""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .diagnostics import TimeSeriesLog  # noqa: E402
from .grid import read_field_snapshot  # noqa: E402

plt.rcParams["figure.figsize"] = (6.0, 4.0)
plt.rcParams["savefig.dpi"] = 150
plt.rcParams["axes.grid"] = True

# channel groups rendered as one figure each
_GROUPS = [
    ("mass", ("mass_c1", "mass_c2"), "total mass"),
    ("min_concentration", ("min_c1", "min_c2"), "minimum concentration"),
    ("free_energy", ("free_energy",), "free energy"),
    ("residuals", ("gauss_residual", "curl_residual"), "constraint residuals"),
    ("train_loss", ("train_loss",), "training loss"),
    ("train_iterations", ("train_iterations",), "training iterations"),
    ("relax_sweeps", ("relax_sweeps",), "relaxation sweeps"),
    ("errors", ("err_c1", "err_c2", "err_d"), "error vs exact solution"),
    ("theta", ("theta_scalar", "theta_analytic"), "dummy value"),
]


def render_timeseries(csv_path, out_dir):
    log = TimeSeriesLog.from_csv(csv_path)
    names = set(log.names())
    written = []
    for stem, channels, title in _GROUPS:
        present = [c for c in channels if c in names]
        if not present:
            continue
        fig, ax = plt.subplots()
        t = log.times()
        logy = stem in ("residuals", "train_loss", "errors")
        for chan in present:
            vals = log.column(chan)
            if logy:
                vals = np.maximum(np.abs(vals), 1e-300)
                ax.semilogy(t, vals, label=chan)
            else:
                ax.plot(t, vals, label=chan)
        ax.set_xlabel("time")
        ax.set_title(title)
        if len(present) > 1:
            ax.legend()
        path = os.path.join(out_dir, f"{stem}.png")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def render_snapshot(snap_path, out_dir):
    meta, arr = read_field_snapshot(snap_path)
    stem = os.path.splitext(os.path.basename(snap_path))[0]
    path = os.path.join(out_dir, f"{stem}.png")
    fig, ax = plt.subplots()
    if arr.ndim == 1:
        ax.plot(arr)
        ax.set_xlabel("cell index")
    else:
        im = ax.imshow(arr, origin="lower", extent=(-1, 1, -1, 1),
                       aspect="equal")
        fig.colorbar(im, ax=ax)
    ax.set_title(f"{meta['field']} at t={meta['t']:.4g}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_phi_series(csv_path, out_dir):
    """Overlay potential profiles from a few rows of the 1D series."""
    with open(csv_path) as fh:
        header = fh.readline()
        if header.startswith("#"):
            header = fh.readline()
        xs = np.array([float(v) for v in header.strip().split(",")[1:]])
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if not rows:
        return None
    data = np.array([[float(v) for v in row] for row in rows])
    times = data[:, 0]
    picks = sorted({0, len(rows) // 4, len(rows) // 2, 3 * len(rows) // 4,
                    len(rows) - 1})
    fig, ax = plt.subplots()
    for k in picks:
        ax.plot(xs, data[k, 1:], label=f"t={times[k]:.3g}")
    ax.set_xlabel("x")
    ax.set_ylabel("potential")
    ax.legend()
    path = os.path.join(out_dir, "phi_profiles.png")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_run(run_dir):
    """Render every recognized artifact in a run directory; returns the
    list of figure paths written under <run_dir>/figures."""
    fig_dir = os.path.join(run_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    written = []
    ts = os.path.join(run_dir, "timeseries.csv")
    if os.path.exists(ts):
        written.extend(render_timeseries(ts, fig_dir))
    phi = os.path.join(run_dir, "phi_timeseries.csv")
    if os.path.exists(phi):
        out = render_phi_series(phi, fig_dir)
        if out:
            written.append(out)
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".csv") and "_step" in name:
            written.append(render_snapshot(os.path.join(run_dir, name), fig_dir))
    return written
