"""Staggered (MAC) grid and typed field containers in 1D and 2D.

Scalars (concentrations, potential, fixed charge) live at cell centers,
vector components (displacement, dummy field, fluxes) at face centers, and
the hidden stream scalar at cell corners (nodes).  Cell data is stored
row-major with x fastest: ``values[j, i]`` addresses cell (i, j).

Face indexing convention: the x-face with column index k sits at the node
level ``x0 + k*dx`` in both layouts, so the left face of cell i is column i
and the right face is column i+1 (modulo nx when periodic).  Periodic grids
store exactly one face per cell per axis -- no duplicated seam face -- so
conservation sums never double count.
"""

import numpy as np

from .errors import GridError

BC_PERIODIC = "periodic"
BC_NO_FLUX = "no-flux"
BC_NEUMANN_FROM_POTENTIAL = "neumann-from-potential"

_CONC_BCS = (BC_PERIODIC, BC_NO_FLUX)
_DISP_BCS = (BC_PERIODIC, BC_NEUMANN_FROM_POTENTIAL)


class StaggeredGrid:
    """Immutable grid descriptor: cell counts, spacings, bc kinds.

    1D grids are built with ``ny=None``.  The face-array layout follows the
    displacement bc: periodic layouts hold nx (x ny) faces per axis,
    non-periodic layouts hold nx+1 x-faces per row and ny+1 y-face rows.
    """

    def __init__(self, nx, dx, x0=-1.0, ny=None, dy=None, y0=-1.0,
                 bc_concentration=BC_NO_FLUX,
                 bc_displacement=BC_NEUMANN_FROM_POTENTIAL):
        if nx < 2:
            raise GridError(f"nx must be >= 2, got {nx}")
        if dx <= 0:
            raise GridError(f"dx must be positive, got {dx}")
        if bc_concentration not in _CONC_BCS:
            raise GridError(f"unknown concentration bc {bc_concentration!r}")
        if bc_displacement not in _DISP_BCS:
            raise GridError(f"unknown displacement bc {bc_displacement!r}")
        conc_periodic = bc_concentration == BC_PERIODIC
        disp_periodic = bc_displacement == BC_PERIODIC
        if conc_periodic != disp_periodic:
            raise GridError("periodic layout requires both bc kinds periodic")

        self.nx = int(nx)
        self.dx = float(dx)
        self.x0 = float(x0)
        self.bc_concentration = bc_concentration
        self.bc_displacement = bc_displacement
        if ny is None:
            self.dim = 1
            self.ny = None
            self.dy = None
            self.y0 = None
        else:
            if ny < 2:
                raise GridError(f"ny must be >= 2, got {ny}")
            if dy is None or dy <= 0:
                raise GridError(f"dy must be positive, got {dy}")
            self.dim = 2
            self.ny = int(ny)
            self.dy = float(dy)
            self.y0 = float(y0)
        # sanity check of the face-count bookkeeping
        if self.periodic:
            assert self.xface_shape[-1] == self.nx
        else:
            assert self.xface_shape[-1] == self.nx + 1

    @property
    def periodic(self):
        return self.bc_displacement == BC_PERIODIC

    @property
    def cell_shape(self):
        return (self.ny, self.nx) if self.dim == 2 else (self.nx,)

    @property
    def n_cells(self):
        return self.nx * (self.ny if self.dim == 2 else 1)

    @property
    def xface_shape(self):
        ncols = self.nx if self.periodic else self.nx + 1
        return (self.ny, ncols) if self.dim == 2 else (ncols,)

    @property
    def yface_shape(self):
        if self.dim != 2:
            raise GridError("y faces only exist in 2D")
        nrows = self.ny if self.periodic else self.ny + 1
        return (nrows, self.nx)

    @property
    def node_shape(self):
        if self.dim == 2:
            return (self.ny, self.nx) if self.periodic else (self.ny + 1, self.nx + 1)
        return (self.nx,) if self.periodic else (self.nx + 1,)

    @property
    def cell_volume(self):
        return self.dx * self.dy if self.dim == 2 else self.dx

    def cell_centers(self):
        """Coordinates of cell centers: x array (1D) or (X, Y) pair (2D)."""
        x = self.x0 + (np.arange(self.nx) + 0.5) * self.dx
        if self.dim == 1:
            return x
        y = self.y0 + (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y)

    def node_positions(self):
        """Coordinates of grid nodes, shaped like ``node_shape``."""
        ncols = self.node_shape[-1]
        x = self.x0 + np.arange(ncols) * self.dx
        if self.dim == 1:
            return x
        nrows = self.node_shape[0]
        y = self.y0 + np.arange(nrows) * self.dy
        return np.meshgrid(x, y)

    def xface_positions(self):
        """Coordinates of x-face centers, shaped like ``xface_shape``."""
        ncols = self.xface_shape[-1]
        x = self.x0 + np.arange(ncols) * self.dx
        if self.dim == 1:
            return x
        y = self.y0 + (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y)

    def yface_positions(self):
        nrows = self.yface_shape[0]
        x = self.x0 + (np.arange(self.nx) + 0.5) * self.dx
        y = self.y0 + np.arange(nrows) * self.dy
        return np.meshgrid(x, y)

    def cell_index(self, i, j=None):
        """Flat row-major index of cell (i, j); x fastest."""
        if self.dim == 1:
            return i
        return j * self.nx + i

    def cell_ij(self, index):
        """Inverse of ``cell_index``."""
        if self.dim == 1:
            return index
        return index % self.nx, index // self.nx

    def __repr__(self):
        if self.dim == 1:
            return f"StaggeredGrid(1d nx={self.nx} dx={self.dx} bc={self.bc_concentration})"
        return (f"StaggeredGrid(2d nx={self.nx} ny={self.ny} dx={self.dx} "
                f"dy={self.dy} bc={self.bc_concentration}/{self.bc_displacement})")


def make_grid(config):
    """Build the grid described by a scenario configuration.

    ``config`` must expose nx, dx, x0, bc_concentration, bc_displacement and,
    for 2D, ny, dy, y0.
    """
    ny = getattr(config, "ny", None)
    return StaggeredGrid(
        nx=config.nx, dx=config.dx, x0=config.x0,
        ny=ny,
        dy=getattr(config, "dy", None),
        y0=getattr(config, "y0", None),
        bc_concentration=config.bc_concentration,
        bc_displacement=config.bc_displacement,
    )


class CellField:
    """A real value per cell, stored row-major with x fastest."""

    def __init__(self, grid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.cell_shape:
            raise GridError(f"cell field shape {values.shape} != {grid.cell_shape}")
        self.grid = grid
        self.values = values

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.cell_shape))

    @classmethod
    def full(cls, grid, value):
        return cls(grid, np.full(grid.cell_shape, float(value)))

    def copy(self):
        return CellField(self.grid, self.values.copy())


class FaceVectorField:
    """Face-centered vector components: x per x-face, y per y-face (2D)."""

    def __init__(self, grid, x, y=None):
        x = np.asarray(x, dtype=float)
        if x.shape != grid.xface_shape:
            raise GridError(f"x-face shape {x.shape} != {grid.xface_shape}")
        self.grid = grid
        self.x = x
        if grid.dim == 2:
            if y is None:
                raise GridError("2D face field needs a y component")
            y = np.asarray(y, dtype=float)
            if y.shape != grid.yface_shape:
                raise GridError(f"y-face shape {y.shape} != {grid.yface_shape}")
            self.y = y
        else:
            if y is not None:
                raise GridError("1D face field has no y component")
            self.y = None

    @classmethod
    def zeros(cls, grid):
        if grid.dim == 2:
            return cls(grid, np.zeros(grid.xface_shape), np.zeros(grid.yface_shape))
        return cls(grid, np.zeros(grid.xface_shape))

    def copy(self):
        y = None if self.y is None else self.y.copy()
        return FaceVectorField(self.grid, self.x.copy(), y)


class NodeField:
    """A real value per grid node (cell corner)."""

    def __init__(self, grid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.node_shape:
            raise GridError(f"node field shape {values.shape} != {grid.node_shape}")
        self.grid = grid
        self.values = values

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.node_shape))

    def copy(self):
        return NodeField(self.grid, self.values.copy())


def midpoints_to_nodes(values, axis=0, periodic=False):
    """Average a line of midpoint samples onto the bracketing nodes.

    n midpoint values map to n+1 node values; the two end nodes take the
    one-sided (nearest midpoint) value.  Periodic lines keep n nodes and
    wrap instead.
    """
    v = np.asarray(values, dtype=float)
    if periodic:
        return 0.5 * (np.roll(v, 1, axis=axis) + v)
    sl_lo = [slice(None)] * v.ndim
    sl_hi = [slice(None)] * v.ndim
    sl_lo[axis] = slice(None, -1)
    sl_hi[axis] = slice(1, None)
    inner = 0.5 * (v[tuple(sl_lo)] + v[tuple(sl_hi)])
    first = [slice(None)] * v.ndim
    first[axis] = slice(0, 1)
    last = [slice(None)] * v.ndim
    last[axis] = slice(-1, None)
    return np.concatenate([v[tuple(first)], inner, v[tuple(last)]], axis=axis)


def interpolate_face_to_node(f):
    """Sample a face vector field at the grid nodes.

    Each node receives the average of the adjacent face values per
    component; boundary nodes use the one-sided value.  Returns the x
    component array (1D) or an (x, y) pair of node-shaped arrays (2D).
    """
    grid = f.grid
    if grid.dim == 1:
        # 1D faces already sit at the node positions
        return f.x.copy()
    per = grid.periodic
    # x faces sit at node x-levels but cell-center y-levels: average in y
    node_x = midpoints_to_nodes(f.x, axis=0, periodic=per)
    # y faces sit at node y-levels but cell-center x-levels: average in x
    node_y = midpoints_to_nodes(f.y, axis=1, periodic=per)
    return node_x, node_y


def write_field_snapshot(path, name, t, field):
    """Write a cell field as CSV, one row per grid line, row-major order.

    Header line: ``# field=<name> t=<time> nx=<nx> ny=<ny>`` (ny=0 in 1D).
    """
    grid = field.grid
    ny = grid.ny if grid.dim == 2 else 0
    rows = field.values if grid.dim == 2 else field.values[np.newaxis, :]
    with open(path, "w") as fh:
        fh.write(f"# field={name} t={float(t)!r} nx={grid.nx} ny={ny}\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_field_snapshot(path):
    """Read a snapshot written by ``write_field_snapshot``.

    Returns (meta dict, ndarray); the array is 1D when ny=0.
    """
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# "):
            raise GridError(f"{path}: missing snapshot header")
        meta = {}
        for tok in header[2:].split():
            key, _, val = tok.partition("=")
            meta[key] = val
        meta["t"] = float(meta["t"])
        meta["nx"] = int(meta["nx"])
        meta["ny"] = int(meta["ny"])
        data = [[float(tok) for tok in line.strip().split(",")]
                for line in fh if line.strip()]
    arr = np.asarray(data)
    if meta["ny"] == 0:
        arr = arr[0]
    return meta, arr
