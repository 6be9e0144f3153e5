"""Trainable denoiser, gradient engine, and the unrolled reconstruction net.

A small reverse-mode differentiation engine covers exactly the node
types these networks need: 3x3 convolutions, half-wave rectifiers,
elementwise arithmetic, and forward/back projection as a matched linear
pair. Everything runs in float64 so gradient checks against central
finite differences are clean.

The unrolled network realizes T gradient-descent-like stages

    x^{t+1} = x^t - alpha_t * ( A^T W (A x^t - y) + G_t(x^t) )

from an FBP initialization, with a trainable step size alpha_t and a
convolutional correction subnet G_t per stage. With all G subnets at
zero and alpha_t = 1/L the forward pass reproduces classic WLS gradient
descent step for step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Image, Sinogram
from .objectives import WlsFidelity, power_method
from .projector import FbpFilter, ProjectionOperator, fbp

# ---------------------------------------------------------------------------
# reverse-mode engine


class Var:
    """Node in the recorded computation: a value plus a backward closure."""

    __slots__ = ("value", "grad", "_parents", "_bw")

    def __init__(self, value, parents=(), bw=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._bw = bw


def _acc(var: Var, g: np.ndarray):
    var.grad = g if var.grad is None else var.grad + g


def vconst(value) -> Var:
    """Leaf that does not require a gradient."""
    return Var(value)


def vadd(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, (a, b))
    out._bw = lambda g: (_acc(a, g), _acc(b, g))
    return out


def vsub(a: Var, b: Var) -> Var:
    out = Var(a.value - b.value, (a, b))
    out._bw = lambda g: (_acc(a, g), _acc(b, -g))
    return out


def vscale(s: Var, x: Var) -> Var:
    """Product of a scalar node and an array node."""
    out = Var(s.value * x.value, (s, x))

    def bw(g):
        _acc(x, s.value * g)
        _acc(s, np.sum(g * x.value))

    out._bw = bw
    return out


def vrelu(x: Var) -> Var:
    mask = x.value > 0.0
    out = Var(np.where(mask, x.value, 0.0), (x,))
    out._bw = lambda g: _acc(x, g * mask)
    return out


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H, W, C*9) patches of the zero-padded input."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, w, c * 9)


def _col2im(gcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`_im2col`; gcols shape (B, H, W, C*9)."""
    b, c, h, w = shape
    g = gcols.reshape(b, h, w, c, 3, 3)
    out = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            out[:, :, di : di + h, dj : dj + w] += g[:, :, :, :, di, dj].transpose(
                0, 3, 1, 2
            )
    return out[:, :, 1:-1, 1:-1]


def vconv2d(x: Var, w: Var, b: Var) -> Var:
    """3x3 same convolution: x (B,C,H,W), w (Cout,Cin,3,3), b (Cout,)."""
    bs, c_in, h, wd = x.value.shape
    c_out = w.value.shape[0]
    patches = _im2col(x.value)
    wmat = w.value.reshape(c_out, c_in * 9).T
    out_val = patches @ wmat + b.value
    out = Var(out_val.transpose(0, 3, 1, 2), (x, w, b))

    def bw(g):
        go = g.transpose(0, 2, 3, 1)  # (B, H, W, Cout)
        gw = patches.reshape(-1, c_in * 9).T @ go.reshape(-1, c_out)
        _acc(w, gw.T.reshape(c_out, c_in, 3, 3))
        _acc(b, go.sum(axis=(0, 1, 2)))
        _acc(x, _col2im(go @ wmat.T, (bs, c_in, h, wd)))

    out._bw = bw
    return out


def vexpand_channel(x: Var) -> Var:
    """(B, H, W) -> (B, 1, H, W)."""
    out = Var(x.value[:, None], (x,))
    out._bw = lambda g: _acc(x, g[:, 0])
    return out


def vsqueeze_channel(x: Var) -> Var:
    """(B, 1, H, W) -> (B, H, W)."""
    out = Var(x.value[:, 0], (x,))
    out._bw = lambda g: _acc(x, g[:, None])
    return out


def vmse(pred: Var, target: np.ndarray) -> Var:
    d = pred.value - target
    out = Var(np.mean(d * d), (pred,))
    out._bw = lambda g: _acc(pred, g * 2.0 * d / d.size)
    return out


def vdot_self(x: Var) -> Var:
    """0.5 * ||x||^2; handy for norm-type losses."""
    out = Var(0.5 * np.sum(x.value * x.value), (x,))
    out._bw = lambda g: _acc(x, g * x.value)
    return out


def vwls_grad(op: ProjectionOperator, weights: np.ndarray, x: Var, y: np.ndarray) -> Var:
    """Data-term node A^T W (A x - y) for batched images x (B, ny, nx).

    The operator pair is self-adjoint under the weighted inner product,
    so the backward map is g -> A^T W A g.
    """
    val = op.adjoint_batch(weights[None] * (op.apply_batch(x.value) - y))
    out = Var(val, (x,))
    out._bw = lambda g: _acc(x, op.adjoint_batch(weights[None] * op.apply_batch(g)))
    return out


class GradientTape:
    """Registry of trainable leaves for one recorded computation."""

    def __init__(self):
        self._params: list[Var] = []

    def param(self, value) -> Var:
        v = Var(np.array(value, dtype=np.float64))
        self._params.append(v)
        return v

    @property
    def params(self) -> list[Var]:
        return list(self._params)

    def n_params(self) -> int:
        return sum(p.value.size for p in self._params)


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backprop(tape: GradientTape, loss: Var) -> np.ndarray:
    """Gradient of a recorded scalar loss with respect to the tape's params."""
    if not isinstance(loss, Var):
        raise TypeError(f"loss must be a recorded node, got {type(loss)}")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    order = _toposort(loss)
    for v in order:
        v.grad = None
    loss.grad = np.ones_like(loss.value)
    for v in reversed(order):
        if v._bw is not None and v.grad is not None:
            v._bw(v.grad)
    pieces = []
    for p in tape.params:
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        pieces.append(np.asarray(g, dtype=np.float64).ravel())
    return np.concatenate(pieces) if pieces else np.zeros(0)


# ---------------------------------------------------------------------------
# parameter initialization


def conv_layer_sizes(layers: list[tuple[int, int]]) -> int:
    return sum(co * ci * 9 + co for ci, co in layers)


def param_init(layers: list[tuple[int, int]], seed: int) -> np.ndarray:
    """Uniform(-b, b) kernels with b = sqrt(6 / (fan_in + fan_out)), zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pieces = []
    for c_in, c_out in layers:
        bound = math.sqrt(6.0 / (c_in * 9 + c_out * 9))
        pieces.append(rng.uniform(-bound, bound, size=c_out * c_in * 9))
        pieces.append(np.zeros(c_out))
    return np.concatenate(pieces)


def _unpack_layers(theta: np.ndarray, layers: list[tuple[int, int]]):
    out = []
    pos = 0
    for c_in, c_out in layers:
        k = theta[pos : pos + c_out * c_in * 9].reshape(c_out, c_in, 3, 3)
        pos += c_out * c_in * 9
        b = theta[pos : pos + c_out]
        pos += c_out
        out.append((k, b))
    if pos != theta.size:
        raise ValueError(f"theta has {theta.size} values, layout needs {pos}")
    return out


# ---------------------------------------------------------------------------
# convolutional denoiser


def _stack_layers(n_layers: int, width: int) -> list[tuple[int, int]]:
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if n_layers == 1:
        return [(1, 1)]
    return [(1, width)] + [(width, width)] * (n_layers - 2) + [(width, 1)]


def _stack_forward(values: np.ndarray, params) -> np.ndarray:
    """Plain (untaped) conv stack on (B, H, W); relu between layers."""
    h = values[:, None]
    for i, (k, b) in enumerate(params):
        if i > 0:
            h = np.where(h > 0.0, h, 0.0)
        c_out = k.shape[0]
        patches = _im2col(h)
        h = (patches @ k.reshape(c_out, -1).T + b).transpose(0, 3, 1, 2)
    return h[:, 0]


def _stack_forward_tape(x: Var, param_vars) -> Var:
    h = vexpand_channel(x)
    for i, (k, b) in enumerate(param_vars):
        if i > 0:
            h = vrelu(h)
        h = vconv2d(h, k, b)
    return vsqueeze_channel(h)


class ConvDenoiser:
    """Residual convolutional denoiser: output = input + conv stack(input).

    Parameters live in a flat float64 vector; with all kernels and biases
    zero the denoiser is the identity. Immutable in spirit: training code
    produces new parameter vectors via :meth:`with_theta`.
    """

    def __init__(
        self,
        n_layers: int = 3,
        width: int = 16,
        theta: np.ndarray | None = None,
        seed: int = 0,
    ):
        self.n_layers = n_layers
        self.width = width
        self.layers = _stack_layers(n_layers, width)
        if theta is None:
            theta = param_init(self.layers, seed)
        theta = np.asarray(theta, dtype=np.float64).copy()
        if theta.size != conv_layer_sizes(self.layers):
            raise ValueError(
                f"theta size {theta.size} does not match layout "
                f"{conv_layer_sizes(self.layers)}"
            )
        self.theta = theta

    @property
    def descriptor(self) -> str:
        return f"conv-denoiser(layers={self.n_layers}, width={self.width})"

    def with_theta(self, theta: np.ndarray) -> "ConvDenoiser":
        return ConvDenoiser(self.n_layers, self.width, theta=theta)

    def forward_batch(self, values: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("denoiser parameters are not finite")
        params = _unpack_layers(self.theta, self.layers)
        return values + _stack_forward(values, params)

    def denoise(self, image: Image) -> Image:
        return Image(image.grid, self.forward_batch(image.values[None])[0])

    def loss_and_grad(
        self, inputs: np.ndarray, targets: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """Mean-squared training loss and its gradient over theta."""
        tape = GradientTape()
        param_vars = []
        for k, b in _unpack_layers(self.theta, self.layers):
            param_vars.append((tape.param(k), tape.param(b)))
        x = vconst(inputs)
        pred = vadd(x, _stack_forward_tape(x, param_vars))
        loss = vmse(pred, np.asarray(targets, dtype=np.float64))
        grad = backprop(tape, loss)
        return float(loss.value), grad


def denoiser_forward(d: ConvDenoiser, x: Image) -> Image:
    """Apply the residual denoiser to one image; deterministic."""
    return d.denoise(x)


# ---------------------------------------------------------------------------
# unrolled network


@dataclass
class UnrolledStage:
    """One unrolled iteration: trainable step size + correction subnet."""

    alpha: float
    g_theta: np.ndarray  # flat parameters of the correction stack
    layers: list[tuple[int, int]]

    def n_params(self) -> int:
        return 1 + self.g_theta.size


class UnrolledNet:
    """Fixed-depth unrolled WLS gradient descent with learned corrections."""

    def __init__(
        self,
        operator: ProjectionOperator,
        weights: np.ndarray,
        stages: list[UnrolledStage],
        fbp_filter: FbpFilter | None = None,
    ):
        if len(stages) < 1:
            raise ValueError("need at least one stage")
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != operator.geometry.shape:
            raise ValueError("weights shape does not match operator geometry")
        self.operator = operator
        self.weights = w
        self.stages = stages
        self.fbp_filter = fbp_filter if fbp_filter is not None else FbpFilter()

    @classmethod
    def build(
        cls,
        operator: ProjectionOperator,
        weights: np.ndarray,
        n_stages: int = 5,
        width: int = 16,
        n_layers: int = 3,
        seed: int = 0,
        alpha0: float | None = None,
        zero_init: bool = False,
    ) -> "UnrolledNet":
        """Fresh network; step sizes default to 1/L from a power-method run."""
        if alpha0 is None:
            y_dummy = Sinogram.zeros(operator.geometry)
            f = WlsFidelity(operator, y_dummy, np.asarray(weights, dtype=np.float64))
            alpha0 = 1.0 / power_method(f, seed=seed)
        layers = _stack_layers(n_layers, width)
        stages = []
        for t in range(n_stages):
            if zero_init:
                g = np.zeros(conv_layer_sizes(layers))
            else:
                g = param_init(layers, seed + 1000 * t)
            stages.append(UnrolledStage(alpha=alpha0, g_theta=g, layers=layers))
        return cls(operator, weights, stages)

    # -- flat parameter vector ------------------------------------------------

    def get_theta(self) -> np.ndarray:
        pieces = []
        for s in self.stages:
            pieces.append(np.array([s.alpha]))
            pieces.append(s.g_theta)
        return np.concatenate(pieces)

    def set_theta(self, theta: np.ndarray):
        pos = 0
        for s in self.stages:
            s.alpha = float(theta[pos])
            pos += 1
            s.g_theta = np.asarray(theta[pos : pos + s.g_theta.size], dtype=np.float64).copy()
            pos += s.g_theta.size
        if pos != theta.size:
            raise ValueError(f"theta has {theta.size} values, layout needs {pos}")

    def n_params(self) -> int:
        return sum(s.n_params() for s in self.stages)

    # -- forward passes ---------------------------------------------------------

    def initial_batch(self, sinos: np.ndarray) -> np.ndarray:
        """FBP initialization for a batch of raw sinogram arrays."""
        out = np.empty((sinos.shape[0],) + self.operator.grid.shape)
        for i, s in enumerate(sinos):
            out[i] = fbp(
                self.operator, Sinogram(self.operator.geometry, s), self.fbp_filter
            ).values
        return out

    def forward_batch(self, sinos: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        """Untaped forward pass on raw batches."""
        if x0 is None:
            x0 = self.initial_batch(sinos)
        x = x0
        for s in self.stages:
            data_grad = self.operator.adjoint_batch(
                self.weights[None] * (self.operator.apply_batch(x) - sinos)
            )
            corr = _stack_forward(x, _unpack_layers(s.g_theta, s.layers))
            x = x - s.alpha * (data_grad + corr)
        return x

    def forward_tape(self, sinos: np.ndarray, x0: np.ndarray, tape: GradientTape) -> Var:
        """Recorded forward pass; registers every stage's parameters."""
        x = vconst(x0)
        for s in self.stages:
            alpha = tape.param(s.alpha)
            param_vars = [
                (tape.param(k), tape.param(b))
                for k, b in _unpack_layers(s.g_theta, s.layers)
            ]
            data_grad = vwls_grad(self.operator, self.weights, x, sinos)
            corr = _stack_forward_tape(x, param_vars)
            x = vsub(x, vscale(alpha, vadd(data_grad, corr)))
        return x

    def loss_and_grad(
        self, sinos: np.ndarray, x0: np.ndarray, targets: np.ndarray
    ) -> tuple[float, np.ndarray]:
        tape = GradientTape()
        pred = self.forward_tape(sinos, x0, tape)
        loss = vmse(pred, targets)
        grad = backprop(tape, loss)
        return float(loss.value), grad


def unrolled_forward(net: UnrolledNet, y: Sinogram) -> Image:
    """Reconstruct one sinogram: FBP init, then the unrolled stages."""
    net.operator.check_sinogram(y)
    out = net.forward_batch(y.values[None])
    return Image(net.operator.grid, out[0])


# ---------------------------------------------------------------------------
# optimizer and training


class AdamW:
    """Adaptive-moment update with decoupled weight decay."""

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = None
        self._v = None
        self._t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(theta)
            self._v = np.zeros_like(theta)
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1**self._t)
        v_hat = self._v / (1.0 - self.beta2**self._t)
        return theta - self.lr * (
            m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta
        )


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def unrolled_train(
    net: UnrolledNet,
    pairs: list[tuple[Sinogram, Image]],
    epochs: int,
    optimizer: AdamW | None = None,
    val_pairs: list[tuple[Sinogram, Image]] | None = None,
    batch_size: int = 8,
    seed: int = 0,
) -> UnrolledNet:
    """Minimize mean MSE against reference images; keep the best-validation
    parameters seen (validation defaults to the training set).

    Deterministic given the seed: mini-batch order, initialization, and
    every update are reproducible. Raises RuntimeError on a non-finite
    training loss.
    """
    if len(pairs) < 1:
        raise ValueError("need at least one training pair")
    if optimizer is None:
        optimizer = AdamW()
    if val_pairs is None:
        val_pairs = pairs

    sinos = np.stack([p[0].values for p in pairs])
    targets = np.stack([p[1].values for p in pairs])
    x0 = net.initial_batch(sinos)
    val_sinos = np.stack([p[0].values for p in val_pairs])
    val_targets = np.stack([p[1].values for p in val_pairs])
    val_x0 = net.initial_batch(val_sinos)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta = net.get_theta()
    best_theta = theta.copy()
    best_val = float(np.mean((net.forward_batch(val_sinos, val_x0) - val_targets) ** 2))

    for epoch in range(epochs):
        for batch in _minibatches(len(pairs), batch_size, rng):
            net.set_theta(theta)
            loss, grad = net.loss_and_grad(sinos[batch], x0[batch], targets[batch])
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch samples {batch.tolist()}"
                )
            theta = optimizer.step(theta, grad)
        net.set_theta(theta)
        val_mse = float(
            np.mean((net.forward_batch(val_sinos, val_x0) - val_targets) ** 2)
        )
        if val_mse < best_val:
            best_val = val_mse
            best_theta = theta.copy()

    net.set_theta(best_theta)
    return net
