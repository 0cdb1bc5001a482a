"""Discrete operators and physics kernels on the staggered grid.

Contains the Bernoulli function, the exponentially fitted two-point
(Scharfetter-Gummel) flux, divergence/curl/gradient stencils, and a
matrix-free conjugate-gradient Poisson solve used for initialization.

Sign conventions.  The drift velocity entering the flux is q*D/eps per
face; with the physical displacement D/eps = -grad(phi) this preserves the
discrete Boltzmann equilibrium c = exp(-q*phi) exactly.  The face-gradient
helper ``potential_gradient_to_faces`` returns eps*grad(phi) *without* a
minus sign; callers that want the physical displacement negate it (the
combination is pinned by tests).
"""

from dataclasses import dataclass

import numpy as np

from .errors import GridError, IncompatibleSource, NonConvergence
from .grid import CellField, FaceVectorField, NodeField

# Below this threshold the direct formula x/expm1(x) and the Taylor series
# agree to ~1e-16; the series keeps the removable singularity finite.
_BERNOULLI_SERIES_CUTOFF = 1e-4


def bernoulli(x):
    """Bernoulli function B(x) = x / (exp(x) - 1).

    The removable singularity at 0 is handled by the Taylor series
    1 - x/2 + x^2/12 - x^4/720 for |x| < 1e-4.  Saturates smoothly for
    large arguments: B(x) -> 0 as x -> +inf and B(x) -> -x as x -> -inf.
    Accepts scalars or arrays.
    """
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    small = np.abs(arr) < _BERNOULLI_SERIES_CUTOFF
    xs = arr[small]
    out[small] = 1.0 - xs / 2.0 + xs * xs / 12.0 - xs**4 / 720.0
    xl = arr[~small]
    with np.errstate(over="ignore"):
        denom = np.expm1(xl)
        out[~small] = np.where(np.isinf(denom), 0.0, xl / denom)
    return float(out[0]) if scalar else out


def sg_flux(c_lo, c_hi, q, d_over_eps, h):
    """Exponentially fitted flux across one face.

    ``c_lo`` / ``c_hi`` are the concentrations on the low/high side of the
    face along the axis, ``d_over_eps`` the face value of D/eps, ``h`` the
    spacing.  Returns -(1/h) * [B(h*q*d_over_eps)*c_hi - B(-h*q*d_over_eps)*c_lo],
    which vanishes exactly on the discrete Boltzmann equilibrium.
    """
    v = h * q * np.asarray(d_over_eps, dtype=float)
    return -(bernoulli(v) * c_hi - bernoulli(-v) * c_lo) / h


class PermittivityField:
    """Cell permittivities plus face values (harmonic mean of neighbors).

    Harmonic averaging keeps the normal flux continuous across material
    jumps and reduces to the constant for uniform eps.  Non-periodic
    boundary faces take the one-sided cell value.
    """

    def __init__(self, grid, cell_values, face_x, face_y=None):
        cell_values = np.asarray(cell_values, dtype=float)
        if np.any(cell_values <= 0):
            raise GridError("permittivity must be strictly positive")
        self.grid = grid
        self.cells = cell_values
        self.face_x = np.asarray(face_x, dtype=float)
        self.face_y = None if face_y is None else np.asarray(face_y, dtype=float)
        if self.face_x.shape != grid.xface_shape:
            raise GridError("face_x shape mismatch")
        if grid.dim == 2 and self.face_y.shape != grid.yface_shape:
            raise GridError("face_y shape mismatch")

    @classmethod
    def from_cells(cls, grid, cell_values):
        c = np.asarray(cell_values, dtype=float)
        if c.shape != grid.cell_shape:
            raise GridError("cell permittivity shape mismatch")

        def harm(a, b):
            return 2.0 * a * b / (a + b)

        if grid.dim == 1:
            if grid.periodic:
                fx = harm(np.roll(c, 1), c)
            else:
                fx = np.empty(grid.xface_shape)
                fx[1:-1] = harm(c[:-1], c[1:])
                fx[0] = c[0]
                fx[-1] = c[-1]
            return cls(grid, c, fx)
        if grid.periodic:
            fx = harm(np.roll(c, 1, axis=1), c)
            fy = harm(np.roll(c, 1, axis=0), c)
        else:
            fx = np.empty(grid.xface_shape)
            fx[:, 1:-1] = harm(c[:, :-1], c[:, 1:])
            fx[:, 0] = c[:, 0]
            fx[:, -1] = c[:, -1]
            fy = np.empty(grid.yface_shape)
            fy[1:-1, :] = harm(c[:-1, :], c[1:, :])
            fy[0, :] = c[0, :]
            fy[-1, :] = c[-1, :]
        return cls(grid, c, fx, fy)

    @classmethod
    def uniform(cls, grid, value):
        return cls.from_cells(grid, np.full(grid.cell_shape, float(value)))


@dataclass
class PoissonSolveReport:
    iterations: int
    residual_inf: float


@dataclass
class PoissonBC:
    """Boundary closure for the Poisson solve.

    kind 'periodic': wrap-around, zero-mean source required.
    kind 'neumann': boundary faces carry prescribed flux eps*dphi/dn values
        (x_lo/x_hi/y_lo/y_hi, + oriented along the axis; default 0).
    kind 'dirichlet-ghost': x_lo etc. hold ghost-cell potential values.
    kind 'robin-1d': phi +/- eta*dphi/dx pinned at the 1D domain ends via
        ghost elimination; needs eta, phi_left, phi_right.
    """
    kind: str = "neumann"
    x_lo: object = None
    x_hi: object = None
    y_lo: object = None
    y_hi: object = None
    eta: float = None
    phi_left: float = None
    phi_right: float = None


def _bc_array(data, shape_or_len):
    if data is None:
        return np.zeros(shape_or_len)
    return np.broadcast_to(np.asarray(data, dtype=float), shape_or_len).copy()


def robin_ghost_coeffs(eta, dx):
    """Ghost elimination for phi -/+ eta*dphi/dx = phi0 at a 1D end.

    Returns (alpha, beta) with phi_ghost = alpha*phi0 - beta*phi_adjacent,
    from the centered closure (phi_g + phi_a)/2 -/+ eta*(slope) = phi0.
    """
    denom = 0.5 + eta / dx
    return 1.0 / denom, (0.5 - eta / dx) / denom


def _poisson_flux_1d(p, grid, eps, bc):
    fx = np.empty(grid.xface_shape)
    if grid.periodic:
        return eps.face_x * (p - np.roll(p, 1)) / grid.dx
    fx[1:-1] = eps.face_x[1:-1] * (p[1:] - p[:-1]) / grid.dx
    if bc.kind == "neumann":
        fx[0] = _bc_array(bc.x_lo, 1)[0]
        fx[-1] = _bc_array(bc.x_hi, 1)[0]
    elif bc.kind == "dirichlet-ghost":
        fx[0] = eps.face_x[0] * (p[0] - float(bc.x_lo)) / grid.dx
        fx[-1] = eps.face_x[-1] * (float(bc.x_hi) - p[-1]) / grid.dx
    elif bc.kind == "robin-1d":
        alpha, beta = robin_ghost_coeffs(bc.eta, grid.dx)
        ghost_lo = alpha * bc.phi_left - beta * p[0]
        ghost_hi = alpha * bc.phi_right - beta * p[-1]
        fx[0] = eps.face_x[0] * (p[0] - ghost_lo) / grid.dx
        fx[-1] = eps.face_x[-1] * (ghost_hi - p[-1]) / grid.dx
    else:
        raise GridError(f"unsupported Poisson bc {bc.kind!r} in 1D")
    return fx


def _poisson_flux_2d(p, grid, eps, bc):
    if grid.periodic:
        fx = eps.face_x * (p - np.roll(p, 1, axis=1)) / grid.dx
        fy = eps.face_y * (p - np.roll(p, 1, axis=0)) / grid.dy
        return fx, fy
    fx = np.empty(grid.xface_shape)
    fy = np.empty(grid.yface_shape)
    fx[:, 1:-1] = eps.face_x[:, 1:-1] * (p[:, 1:] - p[:, :-1]) / grid.dx
    fy[1:-1, :] = eps.face_y[1:-1, :] * (p[1:, :] - p[:-1, :]) / grid.dy
    if bc.kind == "neumann":
        fx[:, 0] = _bc_array(bc.x_lo, grid.ny)
        fx[:, -1] = _bc_array(bc.x_hi, grid.ny)
        fy[0, :] = _bc_array(bc.y_lo, grid.nx)
        fy[-1, :] = _bc_array(bc.y_hi, grid.nx)
    elif bc.kind == "dirichlet-ghost":
        fx[:, 0] = eps.face_x[:, 0] * (p[:, 0] - _bc_array(bc.x_lo, grid.ny)) / grid.dx
        fx[:, -1] = eps.face_x[:, -1] * (_bc_array(bc.x_hi, grid.ny) - p[:, -1]) / grid.dx
        fy[0, :] = eps.face_y[0, :] * (p[0, :] - _bc_array(bc.y_lo, grid.nx)) / grid.dy
        fy[-1, :] = eps.face_y[-1, :] * (_bc_array(bc.y_hi, grid.nx) - p[-1, :]) / grid.dy
    else:
        raise GridError(f"unsupported Poisson bc {bc.kind!r} in 2D")
    return fx, fy


def divergence(f):
    """Per-cell divergence of a face vector field."""
    grid = f.grid
    if grid.dim == 1:
        if grid.periodic:
            d = (np.roll(f.x, -1) - f.x) / grid.dx
        else:
            d = (f.x[1:] - f.x[:-1]) / grid.dx
        return CellField(grid, d)
    if grid.periodic:
        d = (np.roll(f.x, -1, axis=1) - f.x) / grid.dx \
            + (np.roll(f.y, -1, axis=0) - f.y) / grid.dy
    else:
        d = (f.x[:, 1:] - f.x[:, :-1]) / grid.dx \
            + (f.y[1:, :] - f.y[:-1, :]) / grid.dy
    return CellField(grid, d)


def discrete_curl(f, eps):
    """Node-centered curl of f/eps: circulation around each dual cell / area.

    At node (i, j):
        ((f.y/eps) right - left)/dx - ((f.x/eps) above - below)/dy.
    Boundary nodes of a non-periodic grid have no complete dual loop and are
    returned as zero.  Rejected in 1D where the constraint is vacuous.
    """
    grid = f.grid
    if grid.dim != 2:
        raise GridError("curl is only defined on 2D grids")
    wx = f.x / eps.face_x
    wy = f.y / eps.face_y
    if grid.periodic:
        curl = (wy - np.roll(wy, 1, axis=1)) / grid.dx \
            - (wx - np.roll(wx, 1, axis=0)) / grid.dy
        return NodeField(grid, curl)
    ny, nx = grid.ny, grid.nx
    out = np.zeros(grid.node_shape)
    out[1:ny, 1:nx] = (wy[1:ny, 1:nx] - wy[1:ny, 0:nx - 1]) / grid.dx \
        - (wx[1:ny, 1:nx] - wx[0:ny - 1, 1:nx]) / grid.dy
    return NodeField(grid, out)


def flux_field(c, q, d, eps, ghost=None):
    """Exponentially fitted flux on every face for one species.

    ``ghost`` optionally maps sides ('x_lo', 'x_hi', 'y_lo', 'y_hi') to
    ghost-cell concentrations for non-periodic boundaries; without ghosts
    those boundary faces carry exactly zero flux (no-flux contract).
    """
    grid = c.grid
    cv = c.values
    ghost = ghost or {}
    if grid.dim == 1:
        v = d.x / eps.face_x
        if grid.periodic:
            jx = sg_flux(np.roll(cv, 1), cv, q, v, grid.dx)
        else:
            jx = np.zeros(grid.xface_shape)
            jx[1:-1] = sg_flux(cv[:-1], cv[1:], q, v[1:-1], grid.dx)
            if "x_lo" in ghost:
                jx[0] = sg_flux(ghost["x_lo"], cv[0], q, v[0], grid.dx)
            if "x_hi" in ghost:
                jx[-1] = sg_flux(cv[-1], ghost["x_hi"], q, v[-1], grid.dx)
        return FaceVectorField(grid, jx)

    vx = d.x / eps.face_x
    vy = d.y / eps.face_y
    if grid.periodic:
        jx = sg_flux(np.roll(cv, 1, axis=1), cv, q, vx, grid.dx)
        jy = sg_flux(np.roll(cv, 1, axis=0), cv, q, vy, grid.dy)
    else:
        jx = np.zeros(grid.xface_shape)
        jy = np.zeros(grid.yface_shape)
        jx[:, 1:-1] = sg_flux(cv[:, :-1], cv[:, 1:], q, vx[:, 1:-1], grid.dx)
        jy[1:-1, :] = sg_flux(cv[:-1, :], cv[1:, :], q, vy[1:-1, :], grid.dy)
        if "x_lo" in ghost:
            jx[:, 0] = sg_flux(ghost["x_lo"], cv[:, 0], q, vx[:, 0], grid.dx)
        if "x_hi" in ghost:
            jx[:, -1] = sg_flux(cv[:, -1], ghost["x_hi"], q, vx[:, -1], grid.dx)
        if "y_lo" in ghost:
            jy[0, :] = sg_flux(ghost["y_lo"], cv[0, :], q, vy[0, :], grid.dy)
        if "y_hi" in ghost:
            jy[-1, :] = sg_flux(cv[-1, :], ghost["y_hi"], q, vy[-1, :], grid.dy)
    return FaceVectorField(grid, jx, jy)


def potential_gradient_to_faces(phi, eps, ghost=None):
    """Face field eps * (central difference of phi), no minus sign.

    Non-periodic boundary faces default to zero unless ghost potentials are
    supplied (same keys as ``flux_field``).  The physical displacement with
    D/eps = -grad(phi) is the negation of this field.
    """
    grid = phi.grid
    p = phi.values
    ghost = ghost or {}
    if grid.dim == 1:
        if grid.periodic:
            dxv = eps.face_x * (p - np.roll(p, 1)) / grid.dx
        else:
            dxv = np.zeros(grid.xface_shape)
            dxv[1:-1] = eps.face_x[1:-1] * (p[1:] - p[:-1]) / grid.dx
            if "x_lo" in ghost:
                dxv[0] = eps.face_x[0] * (p[0] - ghost["x_lo"]) / grid.dx
            if "x_hi" in ghost:
                dxv[-1] = eps.face_x[-1] * (ghost["x_hi"] - p[-1]) / grid.dx
        return FaceVectorField(grid, dxv)
    if grid.periodic:
        dxv = eps.face_x * (p - np.roll(p, 1, axis=1)) / grid.dx
        dyv = eps.face_y * (p - np.roll(p, 1, axis=0)) / grid.dy
    else:
        dxv = np.zeros(grid.xface_shape)
        dyv = np.zeros(grid.yface_shape)
        dxv[:, 1:-1] = eps.face_x[:, 1:-1] * (p[:, 1:] - p[:, :-1]) / grid.dx
        dyv[1:-1, :] = eps.face_y[1:-1, :] * (p[1:, :] - p[:-1, :]) / grid.dy
        if "x_lo" in ghost:
            dxv[:, 0] = eps.face_x[:, 0] * (p[:, 0] - ghost["x_lo"]) / grid.dx
        if "x_hi" in ghost:
            dxv[:, -1] = eps.face_x[:, -1] * (ghost["x_hi"] - p[:, -1]) / grid.dx
        if "y_lo" in ghost:
            dyv[0, :] = eps.face_y[0, :] * (p[0, :] - ghost["y_lo"]) / grid.dy
        if "y_hi" in ghost:
            dyv[-1, :] = eps.face_y[-1, :] * (ghost["y_hi"] - p[-1, :]) / grid.dy
    return FaceVectorField(grid, dxv, dyv)


def solve_poisson(rho, eps, bc, tol=1e-10, max_iter=None, compat_tol=1e-8):
    """Solve -div(eps grad phi) = rho with matrix-free conjugate gradients.

    Stops when the residual infinity norm drops below ``tol``; the cap
    defaults to 10 * n_cells.  Periodic and pure-Neumann closures are
    singular: the source must have (numerically) zero mean and the returned
    potential is normalized to zero mean.

    Returns (CellField, PoissonSolveReport).  Raises ``IncompatibleSource``
    for an incompatible singular problem and ``NonConvergence`` (report
    attached) at the iteration cap.
    """
    grid = rho.grid
    n = grid.n_cells
    if max_iter is None:
        max_iter = 10 * n
    shape = grid.cell_shape

    def apply_full(p_flat):
        p = p_flat.reshape(shape)
        if grid.dim == 1:
            fx = _poisson_flux_1d(p, grid, eps, bc)
            f = FaceVectorField(grid, fx)
        else:
            fx, fy = _poisson_flux_2d(p, grid, eps, bc)
            f = FaceVectorField(grid, fx, fy)
        return -divergence(f).values.ravel()

    shift = apply_full(np.zeros(n))
    b = rho.values.ravel() - shift
    singular = bc.kind in ("periodic", "neumann")
    if singular:
        mean_rho = float(np.mean(rho.values))
        if bc.kind == "periodic" and abs(mean_rho) > compat_tol:
            raise IncompatibleSource(
                f"periodic Poisson problem needs zero-mean source, got mean {mean_rho:g}")
        mean_b = float(b.mean())
        if abs(mean_b) > max(compat_tol, compat_tol * np.abs(b).max(initial=0.0)):
            raise IncompatibleSource(
                f"singular Poisson problem has incompatible data (defect {mean_b:g})")
        b = b - b.mean()

    def apply_hom(p_flat):
        return apply_full(p_flat) - shift

    x = np.zeros(n)
    r = b.copy()
    res_inf = float(np.abs(r).max(initial=0.0))
    if res_inf <= tol:
        return CellField(grid, x.reshape(shape)), PoissonSolveReport(0, res_inf)
    p = r.copy()
    rs = float(r @ r)
    for k in range(1, max_iter + 1):
        ap = apply_hom(p)
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        res_inf = float(np.abs(r).max())
        if res_inf <= tol:
            if singular:
                x -= x.mean()
            return CellField(grid, x.reshape(shape)), PoissonSolveReport(k, res_inf)
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    report = PoissonSolveReport(max_iter, res_inf)
    raise NonConvergence(
        f"Poisson solve stalled at residual {res_inf:g} after {max_iter} iterations",
        report=report)
