"""Neural corrector for the dummy field in the Maxwell-Ampere update.

A small dense tanh network (with hand-written reverse-mode differentiation
and an adaptive-moment optimizer) is retrained every time step.  In 2D it
emits a node-centered stream scalar whose rotated difference generates a
face field with exactly zero discrete divergence; in 1D it emits the single
scalar value directly (the 1D constraint forces spatial constancy).

Training minimizes a loss evaluated *through* the displacement update,
so the chain from network output to loss is: parameters -> node scalar ->
stream differences -> candidate displacement -> loss.  The update is linear
in the emitted field, which keeps the adjoint pass cheap.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateQuadratic, GridError
from .grid import FaceVectorField, NodeField, interpolate_face_to_node
from .operators import discrete_curl

N_FEATURES = 7


class MlpNetwork:
    """Dense layers with tanh hidden activations and a scalar identity output."""

    def __init__(self, layer_sizes, weights, biases):
        if layer_sizes[-1] != 1:
            raise ValueError("network output dimension must be 1")
        self.layer_sizes = list(layer_sizes)
        self.weights = weights
        self.biases = biases
        for w, b in zip(weights, biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("network parameters must be finite")

    @classmethod
    def initialize(cls, layer_sizes, rng):
        """Uniform init scaled by fan-in, drawn from the supplied generator."""
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
        return cls(list(layer_sizes), weights, biases)

    @property
    def n_layers(self):
        return len(self.weights)

    def forward_batch(self, x):
        """(N, n_in) -> (N,) scalar outputs."""
        a = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            a = z if i == last else np.tanh(z)
        return a[:, 0]

    def forward(self, x):
        """Single feature vector -> float."""
        return float(self.forward_batch(np.asarray(x, dtype=float)[np.newaxis, :])[0])

    def forward_cached(self, x):
        """Forward pass keeping the activations needed by the adjoint pass."""
        acts = [x]
        last = self.n_layers - 1
        a = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            a = z if i == last else np.tanh(z)
            acts.append(a)
        return a[:, 0], acts

    def backward(self, acts, dout):
        """Gradients of sum(dout * output) w.r.t. every parameter.

        ``acts`` comes from ``forward_cached``; ``dout`` is the per-sample
        output cotangent.  Returns [(dW, db), ...] in layer order.
        """
        grads = [None] * self.n_layers
        delta = np.asarray(dout, dtype=float)[:, np.newaxis]
        for i in range(self.n_layers - 1, -1, -1):
            a_prev = acts[i]
            grads[i] = (delta.T @ a_prev, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ self.weights[i]) * (1.0 - acts[i] ** 2)
        return grads

    def flat_parameters(self):
        return np.concatenate([np.concatenate([w.ravel(), b])
                               for w, b in zip(self.weights, self.biases)])

    def set_flat_parameters(self, flat):
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos:pos + b.size].copy()
            pos += b.size
        assert pos == flat.size

    def copy(self):
        return MlpNetwork(list(self.layer_sizes),
                          [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases])


class AdamOptimizer:
    """Adaptive-moment parameter updates with bias correction.

    Holds the first/second moment accumulators (shapes mirror the
    parameters), the step counter, learning rate, decay rates, and the
    denominator guard.
    """

    def __init__(self, net, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b))
                  for w, b in zip(net.weights, net.biases)]
        self.v = [(np.zeros_like(w), np.zeros_like(b))
                  for w, b in zip(net.weights, net.biases)]

    def step(self, net, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, (dw, db) in enumerate(grads):
            mw, mb = self.m[i]
            vw, vb = self.v[i]
            mw *= self.beta1
            mw += (1.0 - self.beta1) * dw
            mb *= self.beta1
            mb += (1.0 - self.beta1) * db
            vw *= self.beta2
            vw += (1.0 - self.beta2) * dw * dw
            vb *= self.beta2
            vb += (1.0 - self.beta2) * db * db
            net.weights[i] -= self.learning_rate * (mw / b1c) / (np.sqrt(vw / b2c) + self.epsilon)
            net.biases[i] -= self.learning_rate * (mb / b1c) / (np.sqrt(vb / b2c) + self.epsilon)


@dataclass
class TrainReport:
    iterations: int
    final_loss: float
    converged: bool


@dataclass
class LossWeights:
    lambda_bc: float = 1.0
    lambda_reg: float = 1e-4
    curl_variant: str = "energy"  # 'energy' or 'curl'

    def __post_init__(self):
        if not (np.isfinite(self.lambda_bc) and self.lambda_bc >= 0):
            raise ValueError("lambda_bc must be finite and nonnegative")
        if not (np.isfinite(self.lambda_reg) and self.lambda_reg >= 0):
            raise ValueError("lambda_reg must be finite and nonnegative")
        if self.curl_variant not in ("energy", "curl"):
            raise ValueError(f"unknown loss variant {self.curl_variant!r}")


def theta_from_stream(u):
    """Face field generated by a node stream scalar; divergence-free by
    construction (the per-cell divergence telescopes to exactly zero).

    x component on the face bounded in y by nodes (k, j) and (k, j+1):
    (u[j+1, k] - u[j, k]) / dy;  y component: -(u[j, i+1] - u[j, i]) / dx.
    """
    grid = u.grid
    if grid.dim != 2:
        raise GridError("stream construction needs a 2D grid")
    uv = u.values
    if grid.periodic:
        tx = (np.roll(uv, -1, axis=0) - uv) / grid.dy
        ty = -(np.roll(uv, -1, axis=1) - uv) / grid.dx
    else:
        tx = (uv[1:, :] - uv[:-1, :]) / grid.dy
        ty = -(uv[:, 1:] - uv[:, :-1]) / grid.dx
    return FaceVectorField(grid, tx, ty)


def stream_adjoint(grid, cot_x, cot_y):
    """Adjoint of ``theta_from_stream``: face cotangents -> node cotangents."""
    out = np.zeros(grid.node_shape)
    gx = cot_x / grid.dy
    gy = cot_y / grid.dx
    if grid.periodic:
        out += np.roll(gx, 1, axis=0) - gx
        out += gy - np.roll(gy, 1, axis=1)
    else:
        out[1:, :] += gx
        out[:-1, :] -= gx
        out[:, :-1] += gy
        out[:, 1:] -= gy
    return out


def node_features(state, horizon):
    """Per-node training inputs, one row per node (2D only).

    Columns: normalized x, normalized y, time / horizon, node-interpolated
    displacement components, node-interpolated previous dummy-field
    components.  Length 7.
    """
    grid = state.grid
    if grid.dim != 2:
        raise GridError("node features are a 2D construction")
    xn, yn = grid.node_positions()
    lx = grid.nx * grid.dx
    ly = grid.ny * grid.dy
    xs = 2.0 * (xn - grid.x0) / lx - 1.0
    ys = 2.0 * (yn - grid.y0) / ly - 1.0
    dnx, dny = interpolate_face_to_node(state.displacement)
    tnx, tny = interpolate_face_to_node(state.theta_prev)
    t = state.time / horizon
    return np.column_stack([
        xs.ravel(), ys.ravel(), np.full(xs.size, t),
        dnx.ravel(), dny.ravel(), tnx.ravel(), tny.ravel(),
    ])


def aggregate_features_1d(state, fluxes, horizon):
    """Step-level inputs for the scalar 1D network.

    Time fraction, then mean and endpoint values of the potential gradient
    and of the valence-weighted flux sum.  Length 7.
    """
    s = state.displacement.x
    qj = np.zeros_like(s)
    for sp, j in zip(state.species, fluxes):
        qj += sp.valence * j.x
    t = state.time / horizon
    return np.array([t, s.mean(), s[0], s[-1], qj.mean(), qj[0], qj[-1]])


def _face_counts(grid):
    return int(np.prod(grid.xface_shape)) + int(np.prod(grid.yface_shape))


def _grad_faces_squared_sum(grid, tx, ty, adjoint=None):
    """Sum of squared one-sided differences of both face components.

    With ``adjoint`` unset, returns the scalar sum; otherwise scatters the
    cotangent of that sum back onto (tx, ty) given adjoint=(gx, gy) output
    arrays to accumulate into (used by the regularizer backward pass).
    """
    dx, dy = grid.dx, grid.dy

    def diffs(arr, axis, h):
        if grid.periodic:
            return (np.roll(arr, -1, axis=axis) - arr) / h
        sl_hi = [slice(None)] * 2
        sl_lo = [slice(None)] * 2
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        return (arr[tuple(sl_hi)] - arr[tuple(sl_lo)]) / h

    if adjoint is None:
        total = 0.0
        for arr in (tx, ty):
            total += float((diffs(arr, 1, dx) ** 2).sum())
            total += float((diffs(arr, 0, dy) ** 2).sum())
        return total

    gx, gy = adjoint
    for arr, acc in ((tx, gx), (ty, gy)):
        for axis, h in ((1, dx), (0, dy)):
            d = 2.0 * diffs(arr, axis, h) / h
            if grid.periodic:
                acc += np.roll(d, 1, axis=axis) - d
            else:
                sl_hi = [slice(None)] * 2
                sl_lo = [slice(None)] * 2
                sl_hi[axis] = slice(1, None)
                sl_lo[axis] = slice(None, -1)
                acc[tuple(sl_hi)] += d
                acc[tuple(sl_lo)] -= d
    return None


def _curl_adjoint(grid, cot):
    """Adjoint of the interior-node curl: node cotangents -> face cotangents."""
    gx = np.zeros(grid.xface_shape)
    gy = np.zeros(grid.yface_shape)
    cx = cot / grid.dy
    cy = cot / grid.dx
    if grid.periodic:
        gy += cy
        gy -= np.roll(cy, -1, axis=1)
        gx -= cx
        gx += np.roll(cx, -1, axis=0)
    else:
        ny, nx = grid.ny, grid.nx
        c = cot[1:ny, 1:nx]
        gy[1:ny, 1:nx] += c / grid.dx
        gy[1:ny, 0:nx - 1] -= c / grid.dx
        gx[1:ny, 1:nx] -= c / grid.dy
        gx[0:ny - 1, 1:nx] += c / grid.dy
    return gx, gy


class Loss2dContext:
    """Per-step 2D training objective evaluated through the update.

    The candidate displacement is base + dt * theta, where base folds in the
    current displacement, the valence-weighted fluxes, and any prescribed
    face source.  The main term is either the mean squared face energy of
    the candidate over permittivity ('energy') or the mean squared interior
    node curl ('curl'); a Neumann-defect penalty over boundary faces and a
    smoothness regularizer on theta are added with their weights.
    """

    def __init__(self, state, fluxes, dt, weights, bc_data=None):
        grid = state.grid
        self.grid = grid
        self.dt = dt
        self.weights = weights
        self.eps = state.eps
        base_x = state.displacement.x.copy()
        base_y = state.displacement.y.copy()
        for sp, j in zip(state.species, fluxes):
            base_x -= dt * sp.valence * j.x
            base_y -= dt * sp.valence * j.y
        if state.displacement_source is not None:
            hx, hy = state.displacement_source(state.time)
            base_x += dt * hx
            base_y += dt * hy
        self.base_x = base_x
        self.base_y = base_y
        self.inv_ex = 1.0 / state.eps.face_x
        self.inv_ey = 1.0 / state.eps.face_y
        self.n_faces = _face_counts(grid)
        if grid.periodic:
            self.n_interior_nodes = grid.nx * grid.ny
            self.n_bc = 0
        else:
            self.n_interior_nodes = (grid.nx - 1) * (grid.ny - 1)
            self.n_bc = 2 * grid.nx + 2 * grid.ny
        self.bc_data = bc_data

    def dstar(self, theta):
        return FaceVectorField(self.grid,
                               self.base_x + self.dt * theta.x,
                               self.base_y + self.dt * theta.y)

    def _bc_defects(self, wx, wy):
        """Neumann defects -(D*/eps).n - g per boundary face, by side."""
        g = self.bc_data or {}
        ny, nx = self.grid.ny, self.grid.nx
        return {
            "x_lo": wx[:, 0] - np.broadcast_to(g.get("x_lo", 0.0), (ny,)),
            "x_hi": -wx[:, -1] - np.broadcast_to(g.get("x_hi", 0.0), (ny,)),
            "y_lo": wy[0, :] - np.broadcast_to(g.get("y_lo", 0.0), (nx,)),
            "y_hi": -wy[-1, :] - np.broadcast_to(g.get("y_hi", 0.0), (nx,)),
        }

    def value(self, theta):
        loss, _, _ = self._evaluate(theta, want_grad=False)
        return loss

    def value_and_grad(self, theta):
        return self._evaluate(theta, want_grad=True)

    def _evaluate(self, theta, want_grad):
        w = self.weights
        grid = self.grid
        ds = self.dstar(theta)
        wx = ds.x * self.inv_ex
        wy = ds.y * self.inv_ey
        gx = np.zeros(grid.xface_shape) if want_grad else None
        gy = np.zeros(grid.yface_shape) if want_grad else None

        if w.curl_variant == "energy":
            loss = (float((wx * wx).sum()) + float((wy * wy).sum())) / self.n_faces
            if want_grad:
                gx += (2.0 / self.n_faces) * wx * self.inv_ex
                gy += (2.0 / self.n_faces) * wy * self.inv_ey
        else:
            curl = discrete_curl(ds, self.eps).values
            loss = float((curl * curl).sum()) / self.n_interior_nodes
            if want_grad:
                ax, ay = _curl_adjoint(grid, (2.0 / self.n_interior_nodes) * curl)
                # the curl acts on ds/eps, so chain the 1/eps factor in
                gx += ax * self.inv_ex
                gy += ay * self.inv_ey

        if not grid.periodic and w.lambda_bc > 0:
            defects = self._bc_defects(wx, wy)
            bc_sum = sum(float((d * d).sum()) for d in defects.values())
            loss += w.lambda_bc * bc_sum / self.n_bc
            if want_grad:
                scale = 2.0 * w.lambda_bc / self.n_bc
                gx[:, 0] += scale * defects["x_lo"] * self.inv_ex[:, 0]
                gx[:, -1] -= scale * defects["x_hi"] * self.inv_ex[:, -1]
                gy[0, :] += scale * defects["y_lo"] * self.inv_ey[0, :]
                gy[-1, :] -= scale * defects["y_hi"] * self.inv_ey[-1, :]

        reg_x = reg_y = None
        if w.lambda_reg > 0:
            reg = _grad_faces_squared_sum(grid, theta.x, theta.y)
            loss += w.lambda_reg * grid.dx * grid.dy * reg
            if want_grad:
                # the regularizer acts on theta directly, not through dstar
                reg_x = np.zeros(grid.xface_shape)
                reg_y = np.zeros(grid.yface_shape)
                _grad_faces_squared_sum(grid, theta.x, theta.y,
                                        adjoint=(reg_x, reg_y))
                scale = w.lambda_reg * grid.dx * grid.dy
                reg_x *= scale
                reg_y *= scale

        if not want_grad:
            return loss, None, None
        # chain the main terms through dstar = base + dt * theta
        gx *= self.dt
        gy *= self.dt
        if reg_x is not None:
            gx += reg_x
            gy += reg_y
        return loss, gx, gy


class Loss1dContext:
    """Squared Robin-compatibility defect of the updated potential gradient.

    The updated gradient is s + (dt/eps0^2) * (theta + sum_l q_l J_l) per
    face; the defect combines a left-endpoint rectangle-rule integral
    (weight dx over the first nx faces) with the eta-weighted endpoint
    values minus the prescribed potential difference.  As a function of the
    scalar theta the loss is exactly (A + B*theta)^2.
    """

    def __init__(self, state, fluxes, dt, robin):
        eta, phi0_right, phi0_left = robin
        grid = state.grid
        if grid.dim != 1:
            raise GridError("1D loss needs a 1D state")
        s = state.displacement.x
        qj = np.zeros_like(s)
        for sp, j in zip(state.species, fluxes):
            qj += sp.valence * j.x
        scale = dt / state.eps0_sq
        s_partial = s + scale * qj
        w = grid.dx
        # rectangle-rule weights cover the nx left face points
        self.A = float(w * s_partial[:-1].sum()
                       + eta * (s_partial[-1] + s_partial[0])
                       - (phi0_right - phi0_left))
        self.B = float(scale * (w * grid.nx + 2.0 * eta))

    def value(self, theta):
        r = self.A + self.B * theta
        return r * r

    def grad(self, theta):
        return 2.0 * (self.A + self.B * theta) * self.B

    def minimizer(self):
        if abs(self.B) < 1e-300:
            raise DegenerateQuadratic(
                "compatibility loss has no quadratic term (zero dt or empty domain)")
        return -self.A / self.B


def loss_2d(theta, state, fluxes, dt, weights, bc_data=None):
    """Scalar 2D training loss for a given candidate dummy field."""
    return Loss2dContext(state, fluxes, dt, weights, bc_data).value(theta)


def loss_1d(theta_scalar, state, fluxes, dt, robin):
    """Scalar 1D Robin-compatibility loss for a given dummy value."""
    return Loss1dContext(state, fluxes, dt, robin).value(theta_scalar)


def analytic_theta_1d(state, fluxes, dt, robin):
    """Exact minimizer of the 1D loss (root of its linear derivative)."""
    return Loss1dContext(state, fluxes, dt, robin).minimizer()


def gradients(net, features, loss_ctx):
    """Reverse-mode parameter gradients of the per-step loss.

    ``features`` is the (N, 7) node matrix for a 2D context or a single
    7-vector for a 1D context.  Returns (loss, [(dW, db), ...]).
    """
    if isinstance(loss_ctx, Loss1dContext):
        x = np.asarray(features, dtype=float)[np.newaxis, :]
        out, acts = net.forward_cached(x)
        theta = float(out[0])
        loss = loss_ctx.value(theta)
        grads = net.backward(acts, np.array([loss_ctx.grad(theta)]))
        return loss, grads
    grid = loss_ctx.grid
    out, acts = net.forward_cached(features)
    u = NodeField(grid, out.reshape(grid.node_shape))
    theta = theta_from_stream(u)
    loss, gx, gy = loss_ctx.value_and_grad(theta)
    du = stream_adjoint(grid, gx, gy)
    grads = net.backward(acts, du.ravel())
    return loss, grads


@dataclass
class TrainSettings:
    """Per-step training controls."""
    loss_tol: float = 1e-8
    max_iters: int = 5000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # stop early once the loss stops improving; the 2D energy objective has
    # a positive floor, so tolerance alone would never fire
    plateau_patience: int = 30
    plateau_rtol: float = 1e-6
    weights: LossWeights = field(default_factory=LossWeights)


def train_and_emit(net, state, fluxes, dt, settings, horizon, robin=None,
                   bc_data=None):
    """Run full-batch optimizer iterations on the per-step loss.

    Stops at loss <= loss_tol (converged), at max_iters, or when the loss
    has not improved relatively by plateau_rtol for plateau_patience
    consecutive iterations.  The network is mutated in place so the next
    step warm-starts from the current parameters.

    Returns (emitted value, TrainReport): a face field in 2D, a float in 1D.
    """
    grid = state.grid
    if grid.dim == 1:
        ctx = Loss1dContext(state, fluxes, dt, robin)
        feats = aggregate_features_1d(state, fluxes, horizon)
    else:
        ctx = Loss2dContext(state, fluxes, dt, settings.weights, bc_data)
        feats = node_features(state, horizon)

    adam = AdamOptimizer(net, settings.learning_rate, settings.beta1,
                         settings.beta2, settings.epsilon)
    stall = 0
    prev_loss = np.inf
    iterations = 0
    converged = False
    loss = None
    for _ in range(settings.max_iters):
        loss, grads = gradients(net, feats, ctx)
        if loss <= settings.loss_tol:
            converged = True
            break
        if prev_loss - loss <= settings.plateau_rtol * max(abs(loss), 1e-300):
            stall += 1
            if stall >= settings.plateau_patience:
                break
        else:
            stall = 0
        prev_loss = loss
        adam.step(net, grads)
        iterations += 1

    if grid.dim == 1:
        emitted = net.forward(feats)
        final_loss = ctx.value(emitted)
    else:
        u = NodeField(grid, net.forward_batch(feats).reshape(grid.node_shape))
        emitted = theta_from_stream(u)
        final_loss = ctx.value(emitted)
    converged = converged or final_loss <= settings.loss_tol
    return emitted, TrainReport(iterations, final_loss, converged)


# ------------------------------------------------------------- checkpoints

_CHECKPOINT_MAGIC = "manp-mlp 1"


def save_network(net, path):
    """Plain-text checkpoint: magic line, layer sizes, then one line per
    parameter array (weights row-major, then bias) in layer order."""
    with open(path, "w") as fh:
        fh.write(_CHECKPOINT_MAGIC + "\n")
        fh.write(" ".join(str(n) for n in net.layer_sizes) + "\n")
        for w, b in zip(net.weights, net.biases):
            fh.write(" ".join(repr(float(v)) for v in w.ravel()) + "\n")
            fh.write(" ".join(repr(float(v)) for v in b) + "\n")


def load_network(path):
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a network checkpoint ({magic!r})")
        sizes = [int(tok) for tok in fh.readline().split()]
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = np.array([float(t) for t in fh.readline().split()])
            b = np.array([float(t) for t in fh.readline().split()])
            weights.append(w.reshape(n_out, n_in))
            biases.append(b)
    return MlpNetwork(sizes, weights, biases)
