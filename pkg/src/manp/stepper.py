"""One time step of the hybrid scheme.

Order of operations per step: semi-implicit conservative transport of every
species, dummy-field selection (closed-form baselines or the trained
network), the Maxwell-Ampere update to the intermediate displacement, and
(2D only) curl-free relaxation; then the history fields rotate.

Transport is implicit in the concentrations with the exponential-fit
coefficients frozen at the current displacement.  The resulting matrix has
a positive diagonal, nonpositive off-diagonals, and column sums exactly
1/dt wherever no boundary flux enters, which is what makes mass
conservation exact and the inverse entrywise nonnegative (positivity) for
any dt > 0.  Row sums equal 1/dt plus the discrete field divergence and are
not dt-uniform; the dominance checks here therefore work column-wise.

The fluxes fed to the displacement update are re-evaluated with the
*updated* concentrations, which makes the discrete Gauss identity
telescope to roundoff.  The lagged baseline formula instead consumes the
explicit start-of-step fluxes of the previous state: feeding it the
realized semi-implicit fluxes makes the formula telescope to its initial
value and silently degenerate into the zero strategy.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import theta_net
from .errors import (
    ConfigError,
    GridError,
    LinearSolveFailure,
    MaxSweepsExceeded,
    MissingHistory,
    StepFailure,
)
from .grid import CellField, FaceVectorField, NodeField
from .operators import bernoulli, flux_field

THETA_KINDS = ("zero", "lagged", "implicit-lagged", "network", "analytic")


@dataclass
class SpeciesState:
    valence: int
    concentration: CellField


@dataclass
class ThetaStrategy:
    kind: str
    network: Optional[theta_net.MlpNetwork] = None

    def __post_init__(self):
        if self.kind not in THETA_KINDS:
            raise ConfigError(f"unknown theta strategy {self.kind!r}")
        if self.kind == "network" and self.network is None:
            raise ConfigError("network strategy needs an attached network")


@dataclass
class StepRecord:
    """Per-step bookkeeping surfaced to the run loop."""
    train_iterations: int = 0
    train_loss: float = 0.0
    train_converged: bool = True
    relax_sweeps: int = 0
    theta_scalar: Optional[float] = None


class SimulationState:
    """Everything one step consumes and produces.

    ``displacement`` holds the face displacement in 2D; in 1D it holds the
    potential gradient dphi/dx (the working variable of the 1D scheme; the
    physical displacement is -eps0^2 times it).  ``flux_prev`` holds the
    explicit fluxes evaluated from the previous state, which is what the
    lagged formula means by previous-step fluxes.

    Scenario couplings are optional attributes: per-species source terms
    ``concentration_sources`` (callables of time returning cell arrays),
    a face source ``displacement_source`` (time -> (hx, hy)), ghost
    concentrations ``concentration_ghosts`` (time -> list of side dicts),
    and Neumann data ``displacement_bc`` (time -> side dict) consumed by
    the network loss.
    """

    def __init__(self, grid, species, displacement, fixed_charge, eps,
                 time=0.0, step_index=0, displacement_prev=None,
                 flux_prev=None, theta_prev=None, eps0_sq=None):
        self.grid = grid
        self.species = species
        self.displacement = displacement
        self.fixed_charge = fixed_charge
        self.eps = eps
        self.time = time
        self.step_index = step_index
        # copied history realizes the documented first-step behavior of the
        # lagged baselines (zero for lagged, exact freeze for implicit-lagged)
        self.displacement_prev = displacement_prev or displacement.copy()
        self.flux_prev = flux_prev or [FaceVectorField.zeros(grid) for _ in species]
        self.theta_prev = theta_prev or FaceVectorField.zeros(grid)
        self.eps0_sq = eps0_sq
        self.concentration_sources = None
        self.displacement_source = None
        self.concentration_ghosts = None
        self.displacement_bc = None
        self.step_record = None

    def charge_density(self):
        rho = self.fixed_charge.values.copy()
        for spc in self.species:
            rho += spc.valence * spc.concentration.values
        return rho

    def _carry_couplings(self, other):
        other.concentration_sources = self.concentration_sources
        other.displacement_source = self.displacement_source
        other.concentration_ghosts = self.concentration_ghosts
        other.displacement_bc = self.displacement_bc
        return other


def physical_displacement_1d(state):
    """Face displacement implied by the stored potential gradient."""
    return FaceVectorField(state.grid, -state.eps.face_x * state.displacement.x)


@dataclass
class TransportMatrix:
    """Implicit transport system for one species: matrix * c_new = rhs.

    ``rhs_bc`` collects ghost-concentration boundary terms; the base right
    hand side is c_old / dt (plus any source).
    """
    matrix: sp.csr_matrix
    rhs_bc: np.ndarray
    dt: float

    def diagonal(self):
        return self.matrix.diagonal()

    def max_offdiagonal(self):
        off = self.matrix.copy().tolil()
        off.setdiag(0.0)
        data = off.tocsr().data
        return float(data.max()) if data.size else 0.0

    def column_dominance_margin(self):
        """Min over columns of diag - sum(|offdiag|); equals 1/dt wherever
        no boundary flux enters."""
        diag = self.matrix.diagonal()
        colsum_abs = np.abs(self.matrix).sum(axis=0).A1
        return float((diag - (colsum_abs - np.abs(diag))).min())

    def check_m_matrix(self):
        if np.any(self.diagonal() <= 0):
            raise LinearSolveFailure("transport diagonal not positive")
        if self.max_offdiagonal() > 0:
            raise LinearSolveFailure("positive off-diagonal in transport matrix")
        if self.column_dominance_margin() <= 0:
            raise LinearSolveFailure("transport matrix lost column dominance")


def _face_links(grid):
    """(lo, hi) flat cell indices for every interior x and y face.

    Returns ((lo_x, hi_x, sel_x), (lo_y, hi_y, sel_y)) where sel picks the
    interior entries out of the face arrays.
    """
    nx = grid.nx
    if grid.dim == 1:
        if grid.periodic:
            hi = np.arange(nx)
            lo = (hi - 1) % nx
            sel = np.arange(nx)
        else:
            hi = np.arange(1, nx)
            lo = hi - 1
            sel = np.arange(1, nx)
        return (lo, hi, sel), None

    ny = grid.ny
    cell = np.arange(nx * ny).reshape(ny, nx)
    if grid.periodic:
        hi_x = cell
        lo_x = np.roll(cell, 1, axis=1)
        sel_x = np.ones(grid.xface_shape, dtype=bool)
        hi_y = cell
        lo_y = np.roll(cell, 1, axis=0)
        sel_y = np.ones(grid.yface_shape, dtype=bool)
    else:
        hi_x = cell[:, 1:]
        lo_x = cell[:, :-1]
        sel_x = np.zeros(grid.xface_shape, dtype=bool)
        sel_x[:, 1:-1] = True
        hi_y = cell[1:, :]
        lo_y = cell[:-1, :]
        sel_y = np.zeros(grid.yface_shape, dtype=bool)
        sel_y[1:-1, :] = True
    return (lo_x.ravel(), hi_x.ravel(), sel_x), (lo_y.ravel(), hi_y.ravel(), sel_y)


def assemble_transport(c, q, d, eps, dt, ghost=None):
    """Build the implicit transport matrix for one species.

    Exponential-fit coefficients are evaluated at the given displacement;
    the unknowns are the new concentrations.  ``ghost`` maps boundary sides
    to ghost concentrations (entering the right hand side); without ghosts
    the non-periodic boundary faces carry no flux.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    grid = c.grid
    n = grid.n_cells
    ghost = ghost or {}
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)

    def add_face_set(lo, hi, vh, h):
        b_minus = bernoulli(-vh)  # multiplies c_lo
        b_plus = bernoulli(vh)    # multiplies c_hi
        inv_h2 = 1.0 / (h * h)
        rows.append(lo)
        cols.append(lo)
        vals.append(b_minus * inv_h2)
        rows.append(lo)
        cols.append(hi)
        vals.append(-b_plus * inv_h2)
        rows.append(hi)
        cols.append(hi)
        vals.append(b_plus * inv_h2)
        rows.append(hi)
        cols.append(lo)
        vals.append(-b_minus * inv_h2)

    def add_ghost(idx, vh, h, cg, lo_side):
        b_minus = bernoulli(-vh)
        b_plus = bernoulli(vh)
        inv_h2 = 1.0 / (h * h)
        if lo_side:  # ghost below the cell
            rows.append(idx)
            cols.append(idx)
            vals.append(np.broadcast_to(b_plus * inv_h2, idx.shape))
            rhs[idx] += b_minus * inv_h2 * cg
        else:
            rows.append(idx)
            cols.append(idx)
            vals.append(np.broadcast_to(b_minus * inv_h2, idx.shape))
            rhs[idx] += b_plus * inv_h2 * cg

    if grid.dim == 1:
        (lo, hi, sel), _ = _face_links(grid)
        v = d.x / eps.face_x
        add_face_set(lo, hi, grid.dx * q * v[sel], grid.dx)
        if not grid.periodic:
            if "x_lo" in ghost:
                add_ghost(np.array([0]), grid.dx * q * v[0], grid.dx,
                          ghost["x_lo"], True)
            if "x_hi" in ghost:
                add_ghost(np.array([n - 1]), grid.dx * q * v[-1], grid.dx,
                          ghost["x_hi"], False)
    else:
        (lo_x, hi_x, sel_x), (lo_y, hi_y, sel_y) = _face_links(grid)
        vx = d.x / eps.face_x
        vy = d.y / eps.face_y
        add_face_set(lo_x, hi_x, (grid.dx * q * vx)[sel_x].ravel(), grid.dx)
        add_face_set(lo_y, hi_y, (grid.dy * q * vy)[sel_y].ravel(), grid.dy)
        if not grid.periodic:
            cell = np.arange(n).reshape(grid.cell_shape)
            if "x_lo" in ghost:
                add_ghost(cell[:, 0], grid.dx * q * vx[:, 0], grid.dx,
                          ghost["x_lo"], True)
            if "x_hi" in ghost:
                add_ghost(cell[:, -1], grid.dx * q * vx[:, -1], grid.dx,
                          ghost["x_hi"], False)
            if "y_lo" in ghost:
                add_ghost(cell[0, :], grid.dy * q * vy[0, :], grid.dy,
                          ghost["y_lo"], True)
            if "y_hi" in ghost:
                add_ghost(cell[-1, :], grid.dy * q * vy[-1, :], grid.dy,
                          ghost["y_hi"], False)

    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(np.full(n, 1.0 / dt))
    rows = np.concatenate([np.asarray(r).ravel() for r in rows])
    cols = np.concatenate([np.asarray(cl).ravel() for cl in cols])
    vals = np.concatenate([np.asarray(v, dtype=float).ravel() for v in vals])
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return TransportMatrix(matrix, rhs, dt)


def advance_concentrations(state, dt, solve_tol=1e-9):
    """Implicit transport solve for every species.

    Returns (new species list, realized fluxes): the fluxes are evaluated
    with the updated concentrations and the current displacement, exactly
    the combination the displacement update needs for the discrete Gauss
    identity to telescope.
    """
    grid = state.grid
    d = state.displacement if grid.dim == 2 else physical_displacement_1d(state)
    t_new = state.time + dt
    ghosts = state.concentration_ghosts(t_new) if state.concentration_ghosts else None
    new_species = []
    fluxes = []
    for li, spc in enumerate(state.species):
        ghost = ghosts[li] if ghosts else None
        tm = assemble_transport(spc.concentration, spc.valence, d, state.eps,
                                dt, ghost)
        b = spc.concentration.values.ravel() / dt + tm.rhs_bc
        if state.concentration_sources is not None:
            src = state.concentration_sources[li]
            if src is not None:
                b = b + np.asarray(src(state.time)).ravel()
        c_new = spla.spsolve(tm.matrix, b)
        residual = np.abs(tm.matrix @ c_new - b).max()
        if not np.isfinite(residual) or residual > solve_tol * max(1.0, np.abs(b).max()):
            raise LinearSolveFailure(
                f"transport solve residual {residual:g} for species {li}")
        cf = CellField(grid, c_new.reshape(grid.cell_shape))
        new_species.append(SpeciesState(spc.valence, cf))
        fluxes.append(flux_field(cf, spc.valence, d, state.eps, ghost))
    return new_species, fluxes


def explicit_fluxes(state):
    """Start-of-step fluxes from the current concentrations/displacement."""
    grid = state.grid
    d = state.displacement if grid.dim == 2 else physical_displacement_1d(state)
    ghosts = state.concentration_ghosts(state.time) if state.concentration_ghosts else None
    out = []
    for li, spc in enumerate(state.species):
        ghost = ghosts[li] if ghosts else None
        out.append(flux_field(spc.concentration, spc.valence, d, state.eps, ghost))
    return out


def _weighted_flux_sum(grid, species, fluxes):
    sx = np.zeros(grid.xface_shape)
    sy = np.zeros(grid.yface_shape) if grid.dim == 2 else None
    for spc, j in zip(species, fluxes):
        sx += spc.valence * j.x
        if sy is not None:
            sy += spc.valence * j.y
    return sx, sy


def compute_theta(strategy, state, fluxes, dt, config=None):
    """Select the dummy field for this step.

    zero: all zeros.  lagged: difference quotient of the stored
    displacement history plus (2D) or minus (1D, with the eps0^2 factor)
    the valence-weighted previous-step explicit fluxes.  implicit-lagged
    (1D only): same difference quotient minus the current-step realized
    fluxes.  network: delegated to the trainer.  analytic (1D only): the
    closed-form minimizer of the compatibility loss.

    Returns (FaceVectorField, StepRecord extras dict).
    """
    grid = state.grid
    extras = {}
    if strategy.kind == "zero":
        return FaceVectorField.zeros(grid), extras

    if strategy.kind in ("lagged", "implicit-lagged"):
        if state.displacement_prev is None or state.flux_prev is None:
            raise MissingHistory(f"{strategy.kind} needs history after step 1")
        if strategy.kind == "implicit-lagged" and grid.dim != 1:
            raise ConfigError("implicit-lagged strategy is defined for 1D runs")
        if grid.dim == 1:
            scale = state.eps0_sq
            ds = scale * (state.displacement.x - state.displacement_prev.x) / dt
            j_ref = fluxes if strategy.kind == "implicit-lagged" else state.flux_prev
            qj, _ = _weighted_flux_sum(grid, state.species, j_ref)
            return FaceVectorField(grid, ds - qj), extras
        dx_ = (state.displacement.x - state.displacement_prev.x) / dt
        dy_ = (state.displacement.y - state.displacement_prev.y) / dt
        qjx, qjy = _weighted_flux_sum(grid, state.species, state.flux_prev)
        return FaceVectorField(grid, dx_ + qjx, dy_ + qjy), extras

    if strategy.kind == "analytic":
        if grid.dim != 1:
            raise ConfigError("analytic strategy is defined for 1D runs")
        robin = (config.eta, config.phi0_right, config.phi0_left)
        value = theta_net.analytic_theta_1d(state, fluxes, dt, robin)
        extras["theta_scalar"] = value
        return FaceVectorField(grid, np.full(grid.xface_shape, value)), extras

    # network
    settings = config.train_settings()
    if grid.dim == 1:
        robin = (config.eta, config.phi0_right, config.phi0_left)
        value, report = theta_net.train_and_emit(
            strategy.network, state, fluxes, dt, settings, config.horizon,
            robin=robin)
        extras["report"] = report
        extras["theta_scalar"] = value
        return FaceVectorField(grid, np.full(grid.xface_shape, value)), extras
    bc_data = state.displacement_bc(state.time + dt) if state.displacement_bc else None
    theta, report = theta_net.train_and_emit(
        strategy.network, state, fluxes, dt, settings, config.horizon,
        bc_data=bc_data)
    extras["report"] = report
    return theta, extras


def maxwell_ampere_update(state, theta, fluxes, dt):
    """Intermediate displacement: D + dt * (-sum_l q_l J_l + theta) per face,
    plus any prescribed face source (2D)."""
    grid = state.grid
    qjx, qjy = _weighted_flux_sum(grid, state.species, fluxes)
    dx_ = state.displacement.x + dt * (-qjx + theta.x)
    if grid.dim == 1:
        return FaceVectorField(grid, dx_)
    dy_ = state.displacement.y + dt * (-qjy + theta.y)
    if state.displacement_source is not None:
        hx, hy = state.displacement_source(state.time)
        dx_ = dx_ + dt * hx
        dy_ = dy_ + dt * hy
    return FaceVectorField(grid, dx_, dy_)


# ------------------------------------------------------- curl-free relaxation

def _relax_tables(grid, eps):
    """Per-node loop data for the relaxation sweeps.

    For every complete dual loop (all nodes when periodic, interior nodes
    otherwise) returns flat indices of the four surrounding faces, the
    1/(eps*h) circulation coefficients, and the local curvature S.
    """
    if grid.dim != 2:
        raise GridError("relaxation needs a 2D grid")
    nx, ny = grid.nx, grid.ny
    dx, dy = grid.dx, grid.dy
    if grid.periodic:
        jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        j_up, j_dn = jj, (jj - 1) % ny
        i_rt, i_lt = ii, (ii - 1) % nx
    else:
        jj, ii = np.meshgrid(np.arange(1, ny), np.arange(1, nx), indexing="ij")
        j_up, j_dn = jj, jj - 1
        i_rt, i_lt = ii, ii - 1
    ncols_x = grid.xface_shape[1]
    ncols_y = grid.yface_shape[1]
    ix_up = (j_up * ncols_x + ii).ravel()
    ix_dn = (j_dn * ncols_x + ii).ravel()
    iy_rt = (jj * ncols_y + i_rt).ravel()
    iy_lt = (jj * ncols_y + i_lt).ravel()
    ex = eps.face_x.ravel()
    ey = eps.face_y.ravel()
    cx_up = 1.0 / (ex[ix_up] * dy)
    cx_dn = 1.0 / (ex[ix_dn] * dy)
    cy_rt = 1.0 / (ey[iy_rt] * dx)
    cy_lt = 1.0 / (ey[iy_lt] * dx)
    s = cx_up / dy + cx_dn / dy + cy_rt / dx + cy_lt / dx
    return (ix_up, ix_dn, iy_rt, iy_lt, cx_up, cx_dn, cy_rt, cy_lt, s,
            jj.shape)


def curl_free_relax_local(d, eps, stop_tol=1e-5, max_sweeps=None, trace=None):
    """Gauss-Seidel loop corrections that drive the curl of D/eps to zero.

    Each node update shifts its four surrounding faces by the stream-bump
    increments +/- delta/h with delta chosen to zero the local circulation;
    that choice also minimizes the local energy integral of |D|^2/eps and
    leaves every cell divergence untouched.  A sweep's exact objective
    decrease is the sum of the per-node decreases w * C^2 / S (no
    cancellation), and sweeping stops once it falls below ``stop_tol``.
    A list passed as ``trace`` collects the per-sweep objective change.

    Returns (relaxed field, sweep count).  Raises ``MaxSweepsExceeded``
    carrying the partial field.
    """
    grid = d.grid
    if max_sweeps is None:
        max_sweeps = 10 * grid.nx * grid.ny
    (ix_up, ix_dn, iy_rt, iy_lt, cx_up, cx_dn, cy_rt, cy_lt, s_arr,
     _) = _relax_tables(grid, eps)
    xv = d.x.copy().ravel()
    yv = d.y.copy().ravel()
    inv_dy = 1.0 / grid.dy
    inv_dx = 1.0 / grid.dx
    w = grid.dx * grid.dy
    n_nodes = s_arr.size
    for sweep in range(1, max_sweeps + 1):
        decrease = 0.0
        for n in range(n_nodes):
            iu = ix_up[n]
            idn = ix_dn[n]
            ir = iy_rt[n]
            il = iy_lt[n]
            circ = (yv[ir] * cy_rt[n] - yv[il] * cy_lt[n]
                    - xv[iu] * cx_up[n] + xv[idn] * cx_dn[n])
            s = s_arr[n]
            delta = -circ / s
            xv[idn] += delta * inv_dy
            xv[iu] -= delta * inv_dy
            yv[il] -= delta * inv_dx
            yv[ir] += delta * inv_dx
            decrease += circ * circ / s
        if trace is not None:
            trace.append(-decrease * w)
        if decrease * w < stop_tol:
            out = FaceVectorField(grid, xv.reshape(grid.xface_shape),
                                  yv.reshape(grid.yface_shape))
            return out, sweep
    out = FaceVectorField(grid, xv.reshape(grid.xface_shape),
                          yv.reshape(grid.yface_shape))
    raise MaxSweepsExceeded(
        f"relaxation still above stop_tol after {max_sweeps} sweeps",
        field=out, sweeps=max_sweeps)


def curl_free_relax_vectorized(d, eps, stop_tol=1e-5, max_sweeps=None,
                               damping=0.5, trace=None):
    """Jacobi variant: all node increments from one snapshot, applied at once
    scaled by ``damping``.

    The applied increment is the stream field of the damped node deltas, so
    divergence preservation is structural.  The exact objective change
    (2 sum w D.inc/eps + sum w inc^2/eps) is computed from the increment
    field itself; with damping <= 1 it is never an increase.  Stopping rule,
    tracing, and error behavior match the local variant.
    """
    grid = d.grid
    if damping <= 0.0 or damping > 1.0:
        raise ConfigError("relaxation damping must lie in (0, 1]")
    if max_sweeps is None:
        max_sweeps = 10 * grid.nx * grid.ny
    (ix_up, ix_dn, iy_rt, iy_lt, cx_up, cx_dn, cy_rt, cy_lt, s_arr,
     node_block) = _relax_tables(grid, eps)
    xv = d.x.copy().ravel()
    yv = d.y.copy().ravel()
    w = grid.dx * grid.dy
    inv_ex = 1.0 / eps.face_x.ravel()
    inv_ey = 1.0 / eps.face_y.ravel()
    for sweep in range(1, max_sweeps + 1):
        circ = (yv[iy_rt] * cy_rt - yv[iy_lt] * cy_lt
                - xv[ix_up] * cx_up + xv[ix_dn] * cx_dn)
        delta = -damping * circ / s_arr
        # embed node deltas, zero on incomplete (boundary) loops
        if grid.periodic:
            delta_node = NodeField(grid, delta.reshape(node_block))
        else:
            buf = np.zeros(grid.node_shape)
            buf[1:-1, 1:-1] = delta.reshape(node_block)
            delta_node = NodeField(grid, buf)
        inc = theta_net.theta_from_stream(delta_node)
        incx = inc.x.ravel()
        incy = inc.y.ravel()
        change = w * float(
            (2.0 * xv * incx + incx * incx) @ inv_ex
            + (2.0 * yv * incy + incy * incy) @ inv_ey)
        xv += incx
        yv += incy
        if trace is not None:
            trace.append(change)
        if -change < stop_tol:
            out = FaceVectorField(grid, xv.reshape(grid.xface_shape),
                                  yv.reshape(grid.yface_shape))
            return out, sweep
    out = FaceVectorField(grid, xv.reshape(grid.xface_shape),
                          yv.reshape(grid.yface_shape))
    raise MaxSweepsExceeded(
        f"relaxation still above stop_tol after {max_sweeps} sweeps",
        field=out, sweeps=max_sweeps)


def relax_objective(d, eps):
    """Energy integral sum(|D|^2 / eps) with face volume weights."""
    grid = d.grid
    w = grid.cell_volume
    ex = (d.x * d.x) / eps.face_x
    total = 0.0
    if grid.dim == 1 or grid.periodic:
        total += float(ex.sum()) * w
    else:
        total += float(ex[:, 1:-1].sum()) * w + float(ex[:, [0, -1]].sum()) * w / 2
    if grid.dim == 2:
        ey = (d.y * d.y) / eps.face_y
        if grid.periodic:
            total += float(ey.sum()) * w
        else:
            total += float(ey[1:-1, :].sum()) * w + float(ey[[0, -1], :].sum()) * w / 2
    return total


# ------------------------------------------------------------- full steps

def _gauss_check(state, tol):
    from .diagnostics import gauss_residual
    res = gauss_residual(state)
    if res > tol:
        raise LinearSolveFailure(
            f"Gauss residual {res:g} exceeded tolerance {tol:g}")


def advance(state, strategy, config):
    """One full 2D step; returns the new state with history rotated."""
    if state.grid.dim != 2:
        raise GridError("advance handles 2D states; use advance_1d")
    dt = config.dt
    try:
        j_explicit = explicit_fluxes(state)
        new_species, fluxes = advance_concentrations(state, dt)
        theta, extras = compute_theta(strategy, state, fluxes, dt, config)
        dstar = maxwell_ampere_update(state, theta, fluxes, dt)
        if config.relax_variant == "local":
            d_new, sweeps = curl_free_relax_local(
                dstar, state.eps, config.relax_stop_tol, config.relax_max_sweeps)
        else:
            d_new, sweeps = curl_free_relax_vectorized(
                dstar, state.eps, config.relax_stop_tol, config.relax_max_sweeps,
                config.relax_damping)
    except Exception as exc:
        raise StepFailure(state.step_index, exc) from exc

    new_state = SimulationState(
        state.grid, new_species, d_new, state.fixed_charge, state.eps,
        time=state.time + dt, step_index=state.step_index + 1,
        displacement_prev=state.displacement, flux_prev=j_explicit,
        theta_prev=theta)
    state._carry_couplings(new_state)
    report = extras.get("report")
    new_state.step_record = StepRecord(
        train_iterations=report.iterations if report else 0,
        train_loss=report.final_loss if report else 0.0,
        train_converged=report.converged if report else True,
        relax_sweeps=sweeps,
        theta_scalar=extras.get("theta_scalar"))
    if config.gauss_tol is not None and strategy.kind in ("zero", "network"):
        _gauss_check(new_state, config.gauss_tol)
    return new_state


def advance_1d(state, strategy, config):
    """One full 1D step: transport, dummy value, gradient update.

    No relaxation runs (a single-axis change cannot be compensated
    elsewhere), so the quality of the dummy value carries the scheme.
    """
    if state.grid.dim != 1:
        raise GridError("advance_1d handles 1D states")
    dt = config.dt
    try:
        j_explicit = explicit_fluxes(state)
        new_species, fluxes = advance_concentrations(state, dt)
        theta, extras = compute_theta(strategy, state, fluxes, dt, config)
        qj, _ = _weighted_flux_sum(state.grid, state.species, fluxes)
        s_new = state.displacement.x + (dt / state.eps0_sq) * (theta.x + qj)
        d_new = FaceVectorField(state.grid, s_new)
    except Exception as exc:
        raise StepFailure(state.step_index, exc) from exc

    new_state = SimulationState(
        state.grid, new_species, d_new, state.fixed_charge, state.eps,
        time=state.time + dt, step_index=state.step_index + 1,
        displacement_prev=state.displacement, flux_prev=j_explicit,
        theta_prev=theta, eps0_sq=state.eps0_sq)
    state._carry_couplings(new_state)
    report = extras.get("report")
    new_state.step_record = StepRecord(
        train_iterations=report.iterations if report else 0,
        train_loss=report.final_loss if report else 0.0,
        train_converged=report.converged if report else True,
        relax_sweeps=0,
        theta_scalar=extras.get("theta_scalar"))
    if config.gauss_tol is not None and strategy.kind in ("zero", "network", "analytic"):
        _gauss_check(new_state, config.gauss_tol)
    return new_state


def reconstruct_potential_1d(dpdx, eta, phi0_left):
    """Cell-centered potential by forward integration of the face slopes.

    The left boundary value comes from the Robin closure
    phi(-1) = phi0(-1) + eta * dphi/dx(-1); the first half step uses the
    boundary slope, then each center-to-center step uses the face between.
    """
    grid = dpdx.grid
    if grid.dim != 1:
        raise GridError("potential reconstruction is a 1D operation")
    s = dpdx.x
    phi = np.empty(grid.cell_shape)
    left = phi0_left + eta * s[0]
    phi[0] = left + 0.5 * grid.dx * s[0]
    for i in range(1, grid.nx):
        phi[i] = phi[i - 1] + grid.dx * s[i]
    return CellField(grid, phi)
