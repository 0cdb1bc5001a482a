"""Conserved-quantity monitors, error norms, and constraint residuals."""

import numpy as np

from .errors import GridError, ManpError, NonpositiveConcentration
from .operators import discrete_curl, divergence


def total_mass(c):
    """Cell sum times cell volume."""
    return float(c.values.sum()) * c.grid.cell_volume


def min_concentration(c):
    return float(c.values.min())


def _face_weights(grid):
    """Volume weight per face; non-periodic boundary faces own half a cell."""
    wx = np.full(grid.xface_shape, grid.cell_volume)
    if not grid.periodic:
        if grid.dim == 1:
            wx[[0, -1]] *= 0.5
        else:
            wx[:, [0, -1]] *= 0.5
    if grid.dim == 1:
        return wx, None
    wy = np.full(grid.yface_shape, grid.cell_volume)
    if not grid.periodic:
        wy[[0, -1], :] *= 0.5
    return wx, wy


def free_energy(state):
    """Entropy plus field energy: sum_l c(ln c - 1) over cells plus
    |D|^2/(2 eps) over faces (the fixed-charge interaction term is not
    included; output headers say so).

    In 1D the field term uses the stored potential gradient s with
    |D|^2/(2 eps) = eps0^2 * s^2 / 2.
    """
    grid = state.grid
    entropy = 0.0
    for spc in state.species:
        c = spc.concentration.values
        if np.any(c <= 0):
            raise NonpositiveConcentration("free energy needs c > 0")
        entropy += float((c * (np.log(c) - 1.0)).sum())
    entropy *= grid.cell_volume
    wx, wy = _face_weights(grid)
    if grid.dim == 1:
        s = state.displacement.x
        fieldterm = float((state.eps.face_x * s * s / 2.0 * wx).sum())
    else:
        d = state.displacement
        fieldterm = float((d.x * d.x / (2.0 * state.eps.face_x) * wx).sum())
        fieldterm += float((d.y * d.y / (2.0 * state.eps.face_y) * wy).sum())
    return entropy + fieldterm


def error_concentration(c_num, c_ref):
    """Root-mean-square cell-wise difference."""
    if c_num.grid is not c_ref.grid and c_num.values.shape != c_ref.values.shape:
        raise GridError("error norm needs matching grids")
    diff = c_num.values - c_ref.values
    return float(np.sqrt((diff * diff).mean()))


def _faces_to_centers(f):
    grid = f.grid
    if grid.periodic:
        cx = 0.5 * (f.x + np.roll(f.x, -1, axis=1))
        cy = 0.5 * (f.y + np.roll(f.y, -1, axis=0))
    else:
        cx = 0.5 * (f.x[:, :-1] + f.x[:, 1:])
        cy = 0.5 * (f.y[:-1, :] + f.y[1:, :])
    return cx, cy


def error_displacement(d_num, d_ref):
    """Mean two-norm of the vector difference, sampled at cell centers by
    averaging the two adjacent faces per component."""
    if d_num.x.shape != d_ref.x.shape:
        raise GridError("error norm needs matching grids")
    ax, ay = _faces_to_centers(d_num)
    bx, by = _faces_to_centers(d_ref)
    return float(np.hypot(ax - bx, ay - by).mean())


def gauss_residual(state):
    """Infinity norm of div(D) - (sum_l q_l c_l + rho_f) over cells.

    In 1D the stored variable is the potential gradient, and the residual is
    eps0^2 * ds/dx + sum_l q_l c_l + rho_f (the same defect expressed in the
    working variable).
    """
    grid = state.grid
    rho = state.charge_density()
    if grid.dim == 1:
        s = state.displacement.x
        ds = (s[1:] - s[:-1]) / grid.dx if not grid.periodic \
            else (np.roll(s, -1) - s) / grid.dx
        return float(np.abs(state.eps0_sq * ds + rho).max())
    div = divergence(state.displacement).values
    return float(np.abs(div - rho).max())


def curl_residual(state):
    """Max interior-node magnitude of the curl of D/eps (2D)."""
    curl = discrete_curl(state.displacement, state.eps)
    return float(np.abs(curl.values).max())


class TimeSeriesLog:
    """Named (time, value) channels appended once per completed step."""

    def __init__(self):
        self.channels = {}

    def append(self, name, t, value):
        chan = self.channels.setdefault(name, [])
        if chan and t <= chan[-1][0]:
            raise ManpError(f"channel {name}: times must strictly increase")
        chan.append((float(t), float(value)))

    def names(self):
        return sorted(self.channels)

    def column(self, name):
        return np.array([v for _, v in self.channels[name]])

    def times(self):
        any_name = self.names()[0]
        return np.array([t for t, _ in self.channels[any_name]])

    def to_csv(self, path, header_meta=""):
        """CSV export: comment header, then time,channel1,channel2,...

        Values are written with repr so a round trip is bit exact.
        """
        names = self.names()
        lengths = {len(self.channels[n]) for n in names}
        if len(lengths) > 1:
            raise ManpError("channels have unequal lengths")
        with open(path, "w") as fh:
            if header_meta:
                fh.write(f"# {header_meta}\n")
            fh.write("time," + ",".join(names) + "\n")
            for k, (t, _) in enumerate(self.channels[names[0]]):
                row = [repr(t)] + [repr(self.channels[n][k][1]) for n in names]
                fh.write(",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path) as fh:
            line = fh.readline()
            if line.startswith("#"):
                line = fh.readline()
            names = line.strip().split(",")[1:]
            if not names or not line.startswith("time"):
                raise ManpError(f"{path}: malformed time series header")
            for raw in fh:
                raw = raw.strip()
                if not raw:
                    continue
                parts = raw.split(",")
                if len(parts) != len(names) + 1:
                    raise ManpError(f"{path}: malformed row {raw!r}")
                t = float(parts[0])
                for name, val in zip(names, parts[1:]):
                    log.channels.setdefault(name, []).append((t, float(val)))
        return log
