"""Built-in experiment definitions and reference oracles.

Three scenarios ship with the solver:

robin1d    two-species electrodiffusion on [-1, 1] with no-flux ion
           boundaries and Robin conditions on the potential; the long-run
           reference is the mass-constrained Poisson-Boltzmann steady state.
analytic2d manufactured solution on [-1, 1]^2 with known fields and
           compensating sources, used for quantitative error tracking.
electro2d  periodic box with two oppositely charged fixed disks and
           initially uniform ions.
"""

import io
from dataclasses import dataclass, fields

import numpy as np

from . import theta_net
from .errors import ConfigError, NewtonDivergence
from .grid import (
    BC_NEUMANN_FROM_POTENTIAL,
    BC_NO_FLUX,
    BC_PERIODIC,
    CellField,
    FaceVectorField,
    StaggeredGrid,
)
from .operators import (
    PermittivityField,
    PoissonBC,
    potential_gradient_to_faces,
    robin_ghost_coeffs,
    solve_poisson,
)
from .stepper import SimulationState, SpeciesState

SCENARIOS = ("robin1d", "analytic2d", "electro2d")

_SCENARIO_DEFAULTS = {
    "robin1d": dict(nx=100, ny=None, dt=0.01, horizon=5.0,
                    relax_variant="none", gauss_tol=1e-8),
    # the boundary penalty must hold its own against the energy term here,
    # otherwise the trained field shrinks near the boundary and the error
    # plateau sits well above the discretization floor
    "analytic2d": dict(nx=50, ny=50, dt=0.005, horizon=0.5, lambda_bc=30.0,
                       relax_variant="vectorized", gauss_tol=None),
    "electro2d": dict(nx=50, ny=50, dt=5e-4, horizon=0.5,
                      relax_variant="vectorized", gauss_tol=1e-8),
}


@dataclass
class ScenarioConfig:
    """Resolved run description; every field has a printable default."""
    scenario: str = "electro2d"
    nx: int = 50
    ny: int = 50
    dt: float = 5e-4
    horizon: float = 0.5
    steps: int = None  # overrides horizon as steps * dt when set
    theta: str = "network"
    seed: int = 0
    out: str = None
    # loss settings
    loss_variant: str = "energy"
    lambda_bc: float = 1.0
    lambda_reg: float = 1e-4
    loss_tol: float = 1e-8
    max_train_iters: int = 5000
    learning_rate: float = 1e-3
    plateau_patience: int = 30
    plateau_rtol: float = 1e-6
    hidden_layers: tuple = (32, 32, 32)
    # 1D constants
    eps0: float = 0.25
    eta: float = 1.0
    phi0_left: float = -1.0
    phi0_right: float = 1.0
    init_concentration: float = 1.0
    # relaxation
    relax_variant: str = "vectorized"  # 'local' | 'vectorized' | 'none'
    relax_stop_tol: float = 1e-5
    relax_max_sweeps: int = None  # default 10 * nx * ny
    relax_damping: float = 0.5
    # tolerances / outputs
    poisson_tol: float = 1e-10
    gauss_tol: float = 1e-8
    snapshot_steps: tuple = (10, 100, 500, 1000)
    phi_series_every: int = 1

    # domain is [-1, 1] per axis for every built-in scenario
    x0 = -1.0
    y0 = -1.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.steps is not None:
            self.steps = int(self.steps)
            if self.steps < 1:
                raise ConfigError("steps must be >= 1")
            self.horizon = self.steps * self.dt
        if self.horizon < self.dt:
            raise ConfigError("horizon must cover at least one step")
        if self.theta not in ("zero", "lagged", "implicit-lagged", "network",
                              "analytic"):
            raise ConfigError(f"unknown theta strategy {self.theta!r}")
        if self.loss_variant not in ("energy", "curl"):
            raise ConfigError(f"unknown loss variant {self.loss_variant!r}")
        if self.relax_variant not in ("local", "vectorized", "none"):
            raise ConfigError(f"unknown relaxation variant {self.relax_variant!r}")
        if self.relax_variant == "vectorized" and not (0 < self.relax_damping <= 1):
            raise ConfigError("relax_damping must lie in (0, 1]")
        if isinstance(self.hidden_layers, list):
            self.hidden_layers = tuple(self.hidden_layers)
        if isinstance(self.snapshot_steps, list):
            self.snapshot_steps = tuple(self.snapshot_steps)

    @property
    def dim(self):
        return 1 if self.scenario == "robin1d" else 2

    @property
    def dx(self):
        return 2.0 / self.nx

    @property
    def dy(self):
        return None if self.dim == 1 else 2.0 / self.ny

    @property
    def bc_concentration(self):
        return BC_PERIODIC if self.scenario == "electro2d" else BC_NO_FLUX

    @property
    def bc_displacement(self):
        return BC_PERIODIC if self.scenario == "electro2d" \
            else BC_NEUMANN_FROM_POTENTIAL

    @property
    def n_steps(self):
        if self.steps is not None:
            return self.steps
        return int(round(self.horizon / self.dt))

    def train_settings(self):
        return theta_net.TrainSettings(
            loss_tol=self.loss_tol,
            max_iters=self.max_train_iters,
            learning_rate=self.learning_rate,
            plateau_patience=self.plateau_patience,
            plateau_rtol=self.plateau_rtol,
            weights=theta_net.LossWeights(self.lambda_bc, self.lambda_reg,
                                          self.loss_variant),
        )

    def make_grid(self):
        if self.dim == 1:
            return StaggeredGrid(self.nx, self.dx, self.x0,
                                 bc_concentration=self.bc_concentration,
                                 bc_displacement=self.bc_displacement)
        return StaggeredGrid(self.nx, self.dx, self.x0, self.ny, self.dy,
                             self.y0,
                             bc_concentration=self.bc_concentration,
                             bc_displacement=self.bc_displacement)


def resolve_config(scenario, **overrides):
    """Scenario defaults with explicit overrides applied on top."""
    if scenario not in _SCENARIO_DEFAULTS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    params = dict(_SCENARIO_DEFAULTS[scenario])
    params.update({k: v for k, v in overrides.items() if v is not None})
    if scenario == "robin1d":
        params["ny"] = None
    return ScenarioConfig(scenario=scenario, **params)


_INT_KEYS = {"nx", "ny", "steps", "seed", "max_train_iters", "plateau_patience",
             "relax_max_sweeps", "phi_series_every"}
_FLOAT_KEYS = {"dt", "horizon", "loss_tol", "learning_rate", "plateau_rtol",
               "lambda_bc", "lambda_reg", "eps0", "eta", "phi0_left",
               "phi0_right", "init_concentration", "relax_stop_tol",
               "relax_damping", "poisson_tol", "gauss_tol"}
_TUPLE_KEYS = {"hidden_layers", "snapshot_steps"}
_NULLABLE_KEYS = {"ny", "steps", "out", "relax_max_sweeps", "gauss_tol"}


def parse_config_text(text):
    """Flat key = value format; '#' comments; unknown keys rejected."""
    known = {f.name for f in fields(ScenarioConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in _NULLABLE_KEYS and val.lower() == "none":
            out[key] = None
        elif key in _INT_KEYS:
            out[key] = int(val)
        elif key in _FLOAT_KEYS:
            out[key] = float(val)
        elif key in _TUPLE_KEYS:
            out[key] = tuple(int(tok) for tok in val.split(",") if tok.strip())
        else:
            out[key] = val
    return out


def parse_config_file(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


def print_config(config, stream=None):
    """Emit every resolved field in the same flat key = value format."""
    buf = stream or io.StringIO()
    for f in fields(ScenarioConfig):
        val = getattr(config, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        buf.write(f"{f.name} = {val}\n")
    if stream is None:
        return buf.getvalue()
    return None


# ----------------------------------------------------------- exact solution

@dataclass
class ExactSolution:
    """Manufactured fields: a decaying paraboloid potential with its
    Boltzmann concentration pair, plus the compensating source terms."""
    valences: tuple = (1, -1)

    @staticmethod
    def phi(x, y, t):
        return 0.5 * (x * x + y * y) * np.exp(-t)

    @staticmethod
    def dphi_dt(x, y, t):
        return -0.5 * (x * x + y * y) * np.exp(-t)

    def conc(self, l, x, y, t):
        q = self.valences[l]
        return np.exp(-q * self.phi(x, y, t))

    @staticmethod
    def displacement(x, y, t):
        """D = -grad(phi) with unit permittivity."""
        e = np.exp(-t)
        return -x * e, -y * e

    def conc_source(self, l, x, y, t):
        """f_l = dc/dt: the manufactured flux vanishes identically, so the
        transport source is just the time derivative of the exact profile."""
        q = self.valences[l]
        return -q * self.conc(l, x, y, t) * self.dphi_dt(x, y, t)

    @staticmethod
    def displacement_source(x, y, t):
        """h = (x - y, y - x) e^{-t}; with it the implied dummy field
        (y, x) e^{-t} is divergence-free."""
        e = np.exp(-t)
        return (x - y) * e, (y - x) * e

    @staticmethod
    def neumann_data(grid, t):
        """g = dphi/dn per boundary side at the face centers.

        dphi/dx = x e^{-t} and dphi/dy = y e^{-t}; the outward normal flips
        the sign on the low sides, so every side of the unit box carries
        e^{-t}.
        """
        e = np.exp(-t)
        x_hi = grid.x0 + grid.nx * grid.dx
        y_hi = grid.y0 + grid.ny * grid.dy
        return {
            "x_lo": np.full(grid.ny, -grid.x0 * e),
            "x_hi": np.full(grid.ny, x_hi * e),
            "y_lo": np.full(grid.nx, -grid.y0 * e),
            "y_hi": np.full(grid.nx, y_hi * e),
        }


def build_analytic2d(config):
    """Initial state sampled from the exact solution, sources attached."""
    if config.scenario != "analytic2d":
        raise ConfigError("config is not an analytic2d configuration")
    grid = config.make_grid()
    exact = ExactSolution()
    eps = PermittivityField.uniform(grid, 1.0)
    xc, yc = grid.cell_centers()
    species = [SpeciesState(q, CellField(grid, exact.conc(l, xc, yc, 0.0)))
               for l, q in enumerate(exact.valences)]
    xfx, xfy = grid.xface_positions()
    yfx, yfy = grid.yface_positions()
    dx0, _ = exact.displacement(xfx, xfy, 0.0)
    _, dy0 = exact.displacement(yfx, yfy, 0.0)
    state = SimulationState(grid, species,
                            FaceVectorField(grid, dx0, dy0),
                            CellField.zeros(grid), eps)

    def make_source(l):
        return lambda t: exact.conc_source(l, xc, yc, t).ravel()

    state.concentration_sources = [make_source(l) for l in range(2)]

    def disp_source(t):
        hx, _ = exact.displacement_source(xfx, xfy, t)
        _, hy = exact.displacement_source(yfx, yfy, t)
        return hx, hy

    state.displacement_source = disp_source

    gx_lo = grid.x0 - 0.5 * grid.dx
    gx_hi = grid.x0 + (grid.nx + 0.5) * grid.dx
    gy_lo = grid.y0 - 0.5 * grid.dy
    gy_hi = grid.y0 + (grid.ny + 0.5) * grid.dy
    ycol = yc[:, 0]
    xrow = xc[0, :]

    def ghosts(t):
        return [{
            "x_lo": exact.conc(l, gx_lo, ycol, t),
            "x_hi": exact.conc(l, gx_hi, ycol, t),
            "y_lo": exact.conc(l, xrow, gy_lo, t),
            "y_hi": exact.conc(l, xrow, gy_hi, t),
        } for l in range(2)]

    state.concentration_ghosts = ghosts

    state.displacement_bc = lambda t: exact.neumann_data(grid, t)
    return state, exact


def _disk_charge(grid):
    xc, yc = grid.cell_centers()
    rho = np.zeros(grid.cell_shape)
    rho[(xc - 0.5) ** 2 + yc**2 <= 0.09] = 1.0
    rho[(xc + 0.5) ** 2 + yc**2 <= 0.09] = -1.0
    return rho


def build_electro2d(config):
    """Periodic box, uniform unit ions, two oppositely charged fixed disks;
    the initial displacement comes from the Poisson solve."""
    if config.scenario != "electro2d":
        raise ConfigError("config is not an electro2d configuration")
    grid = config.make_grid()
    eps = PermittivityField.uniform(grid, 1.0)
    c0 = config.init_concentration
    species = [SpeciesState(1, CellField.full(grid, c0)),
               SpeciesState(-1, CellField.full(grid, c0))]
    fixed = CellField(grid, _disk_charge(grid))
    rho = fixed.values + sum(s.valence * s.concentration.values for s in species)
    phi, _ = solve_poisson(CellField(grid, rho), eps, PoissonBC("periodic"),
                           tol=config.poisson_tol)
    grad = potential_gradient_to_faces(phi, eps)
    # the physical displacement satisfies D/eps = -grad(phi)
    disp = FaceVectorField(grid, -grad.x, -grad.y)
    return SimulationState(grid, species, disp, fixed, eps)


def build_robin1d(config):
    """Two unit-valence species on [-1, 1]; the initial potential solves the
    screened Poisson problem under the Robin closure and the stored face
    variable is its centered gradient."""
    if config.scenario != "robin1d":
        raise ConfigError("config is not a robin1d configuration")
    grid = config.make_grid()
    eps0_sq = config.eps0**2
    eps = PermittivityField.uniform(grid, eps0_sq)
    c0 = config.init_concentration
    species = [SpeciesState(1, CellField.full(grid, c0)),
               SpeciesState(-1, CellField.full(grid, c0))]
    fixed = CellField.zeros(grid)
    rho = fixed.values + sum(s.valence * s.concentration.values for s in species)
    bc = PoissonBC("robin-1d", eta=config.eta, phi_left=config.phi0_left,
                   phi_right=config.phi0_right)
    phi, _ = solve_poisson(CellField(grid, rho), eps, bc, tol=config.poisson_tol)
    alpha, beta = robin_ghost_coeffs(config.eta, grid.dx)
    ghost_lo = alpha * config.phi0_left - beta * phi.values[0]
    ghost_hi = alpha * config.phi0_right - beta * phi.values[-1]
    s = np.empty(grid.xface_shape)
    s[1:-1] = (phi.values[1:] - phi.values[:-1]) / grid.dx
    s[0] = (phi.values[0] - ghost_lo) / grid.dx
    s[-1] = (ghost_hi - phi.values[-1]) / grid.dx
    return SimulationState(grid, species, FaceVectorField(grid, s), fixed, eps,
                           eps0_sq=eps0_sq)


def build_scenario(config):
    """Dispatch to the scenario builder; analytic2d also returns the exact
    solution (None otherwise)."""
    if config.scenario == "robin1d":
        return build_robin1d(config), None
    if config.scenario == "electro2d":
        return build_electro2d(config), None
    return build_analytic2d(config)


# ------------------------------------------- Poisson-Boltzmann steady state

def pb_steady_state_1d(config, masses=None, tol=1e-10, max_iter=60):
    """Mass-constrained Poisson-Boltzmann steady state under Robin closure.

    Solves eps0^2 phi'' = -(rho_f + sum_l q_l c_l) with
    c_l = m_l exp(-q_l phi) / integral(exp(-q_l phi)) by damped Newton on
    the discrete residual.  Masses default to the scenario's initial data.
    Returns (CellField phi, list of CellField concentrations).
    """
    grid = config.make_grid()
    eps0_sq = config.eps0**2
    n = grid.nx
    dx = grid.dx
    valences = (1, -1)
    if masses is None:
        masses = [config.init_concentration * 2.0, config.init_concentration * 2.0]

    alpha, beta = robin_ghost_coeffs(config.eta, dx)
    lap = np.zeros((n, n))
    bc_vec = np.zeros(n)
    for i in range(n):
        lap[i, i] = -2.0
        if i > 0:
            lap[i, i - 1] = 1.0
        if i < n - 1:
            lap[i, i + 1] = 1.0
    # ghost elimination: phi_ghost = alpha*phi0 - beta*phi_adjacent
    lap[0, 0] += -beta
    lap[-1, -1] += -beta
    lap /= dx * dx
    bc_vec[0] = alpha * config.phi0_left / dx**2
    bc_vec[-1] = alpha * config.phi0_right / dx**2

    def closures(phi):
        concs, d_concs = [], []
        for q, m in zip(valences, masses):
            w = np.exp(-q * phi)
            s = w.sum() * dx
            c = m * w / s
            # dc_i/dphi_j = -q c_i (delta_ij - c_j dx / m)
            jac = -q * (np.diag(c) - np.outer(c, c) * dx / m)
            concs.append(c)
            d_concs.append(jac)
        return concs, d_concs

    def residual(phi):
        concs, _ = closures(phi)
        rho = np.zeros(n)
        for q, c in zip(valences, concs):
            rho += q * c
        return eps0_sq * (lap @ phi + bc_vec) + rho

    phi = np.zeros(n)
    log = []
    res = residual(phi)
    res_norm = np.abs(res).max()
    for it in range(max_iter):
        if res_norm <= tol:
            break
        concs, d_concs = closures(phi)
        jac = eps0_sq * lap.copy()
        for q, dj in zip(valences, d_concs):
            jac += q * dj
        step = np.linalg.solve(jac, -res)
        lam = 1.0
        for _ in range(40):
            trial = phi + lam * step
            trial_res = residual(trial)
            trial_norm = np.abs(trial_res).max()
            if trial_norm < res_norm:
                break
            lam *= 0.5
        else:
            raise NewtonDivergence(
                f"damped Newton stalled at residual {res_norm:g}", log)
        phi, res, res_norm = trial, trial_res, trial_norm
        log.append((it, res_norm))
    else:
        if res_norm > tol:
            raise NewtonDivergence(
                f"Newton hit iteration cap at residual {res_norm:g}", log)
    concs, _ = closures(phi)
    return (CellField(grid, phi),
            [CellField(grid, c) for c in concs])
