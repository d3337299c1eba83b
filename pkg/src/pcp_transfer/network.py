"""Dense feedforward regression networks on a flat parameter vector.

Layer ``i`` maps ``R^d -> R^k`` as ``a_i(W_i x + b_i)``.  All parameters live
in one contiguous vector laid out layer by layer as ``[W_1 (row-major), b_1,
W_2, b_2, ...]``; the last layer is the task head and everything before it is
the shared body.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    """Raised when inputs or parameter vectors do not match an architecture."""


@dataclass(frozen=True)
class Architecture:
    """Layer widths (input first, output last) and one activation per layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ShapeError("an architecture needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ShapeError(f"widths must be positive, got {widths}")
        if widths[-1] != 1:
            raise ShapeError("only single-output networks are supported")
        acts = tuple(self.activations) or ("relu",) * (len(widths) - 2) + ("identity",)
        if len(acts) != len(widths) - 1:
            raise ShapeError(f"expected {len(widths) - 1} activations, got {len(acts)}")
        unknown = set(acts) - set(ACTIVATIONS)
        if unknown:
            raise ShapeError(f"unknown activations {sorted(unknown)}")
        if acts[-1] != "identity":
            raise ShapeError("the output activation must be identity for regression")
        object.__setattr__(self, "activations", acts)

    @classmethod
    def linear(cls, widths) -> Architecture:
        """Network with identity activations everywhere."""
        widths = tuple(widths)
        return cls(widths, ("identity",) * (len(widths) - 1))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_body_layers(self) -> int:
        return self.n_layers - 1

    @cached_property
    def param_counts(self) -> tuple[int, ...]:
        return tuple(k * (d + 1) for d, k in zip(self.widths[:-1], self.widths[1:]))

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.param_counts)]))

    @property
    def n_params(self) -> int:
        return self.offsets[-1]

    @property
    def head_offset(self) -> int:
        return self.offsets[-2]

    def layer_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    @cached_property
    def layer_index(self) -> np.ndarray:
        """Layer number of every coordinate of the flat vector."""
        return np.repeat(np.arange(self.n_layers), self.param_counts)


def param_counts(arch: Architecture) -> tuple[int, ...]:
    """Parameters per layer, ``k_i * (d_i + 1)``."""
    return arch.param_counts


def _split(flat: np.ndarray, arch: Architecture):
    """Weight matrices and bias vectors as views into ``flat``."""
    out = []
    for i, (d, k) in enumerate(zip(arch.widths[:-1], arch.widths[1:])):
        start = arch.offsets[i]
        W = flat[start : start + k * d].reshape(k, d)
        b = flat[start + k * d : start + k * (d + 1)]
        out.append((W, b))
    return out


@dataclass
class _Layered:
    arch: Architecture
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        if self.flat.shape != (self.arch.n_params,):
            raise ShapeError(
                f"flat vector has shape {self.flat.shape}, architecture needs ({self.arch.n_params},)"
            )

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return _split(self.flat, self.arch)[i]

    @property
    def body(self) -> np.ndarray:
        return self.flat[: self.arch.head_offset]

    @property
    def head(self) -> np.ndarray:
        return self.flat[self.arch.head_offset :]


@dataclass
class NetworkParams(_Layered):
    """Weights and biases of every layer; the final layer is the task head."""

    def copy(self) -> NetworkParams:
        return NetworkParams(self.arch, self.flat.copy())

    def with_head(self, head: np.ndarray) -> NetworkParams:
        flat = self.flat.copy()
        flat[self.arch.head_offset :] = head
        return NetworkParams(self.arch, flat)

    @classmethod
    def zeros(cls, arch: Architecture) -> NetworkParams:
        return cls(arch, np.zeros(arch.n_params))


@dataclass
class GradientBundle(_Layered):
    """Gradient of the scalar output, shape-congruent with :class:`NetworkParams`."""


def glorot_init(arch: Architecture, rng: np.random.Generator) -> NetworkParams:
    """Uniform Glorot weights on ``+-sqrt(6 / (fan_in + fan_out))``, zero biases."""
    flat = np.zeros(arch.n_params)
    for i, (d, k) in enumerate(zip(arch.widths[:-1], arch.widths[1:])):
        limit = np.sqrt(6.0 / (d + k))
        start = arch.offsets[i]
        flat[start : start + k * d] = rng.uniform(-limit, limit, size=k * d)
    return NetworkParams(arch, flat)


def _as_rows(arch: Architecture, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ShapeError(f"input of shape {np.shape(x)} does not match input width {arch.input_dim}")
    return X, single


def _forward_cache(flat: np.ndarray, arch: Architecture, X: np.ndarray):
    """Layer inputs and ReLU masks for a batch, plus the output vector."""
    inputs, masks = [], []
    h = X
    for (W, b), act in zip(_split(flat, arch), arch.activations):
        inputs.append(h)
        z = h @ W.T + b
        if act == "relu":
            mask = z > 0
            h = z * mask
        else:
            mask = None
            h = z
        masks.append(mask)
    return inputs, masks, h[:, 0]


def _backward(flat, arch, inputs, masks, g):
    """Yield ``(layer, delta)`` from the top, where ``delta`` is dOut/dz_i per row."""
    layers = _split(flat, arch)
    delta = g[:, None]
    for i in range(arch.n_layers - 1, -1, -1):
        if masks[i] is not None:
            delta = delta * masks[i]
        yield i, delta
        if i > 0:
            delta = delta @ layers[i][0]


def forward(params: NetworkParams, x):
    """Network output for one input vector (float) or a batch of rows (array)."""
    X, single = _as_rows(params.arch, x)
    out = _forward_cache(params.flat, params.arch, X)[2]
    return float(out[0]) if single else out


def forward_flat(flat: np.ndarray, arch: Architecture, X: np.ndarray) -> np.ndarray:
    """Batch forward pass on a raw flat vector, skipping validation."""
    return _forward_cache(flat, arch, X)[2]


def forward_many(thetas: np.ndarray, arch: Architecture, X: np.ndarray) -> np.ndarray:
    """Outputs for a stack of flat parameter vectors, shape ``(S, N)``."""
    thetas = np.atleast_2d(thetas)
    h = np.broadcast_to(X, (thetas.shape[0],) + X.shape)
    for i, ((d, k), act) in enumerate(zip(zip(arch.widths[:-1], arch.widths[1:]), arch.activations)):
        start = arch.offsets[i]
        W = thetas[:, start : start + k * d].reshape(-1, k, d)
        b = thetas[:, start + k * d : start + k * (d + 1)]
        h = h @ W.transpose(0, 2, 1) + b[:, None, :]
        if act == "relu":
            np.maximum(h, 0.0, out=h)
    return h[:, :, 0]


def value_and_vjp(flat: np.ndarray, arch: Architecture, X: np.ndarray, weight_fn):
    """Outputs ``f`` and the gradient of ``sum_n g_n f(x_n)`` with ``g = weight_fn(f)``.

    Lets a loss compute its per-row output weights from the forward pass
    without a second sweep through the network.
    """
    inputs, masks, out = _forward_cache(flat, arch, X)
    g = weight_fn(out)
    grad = np.empty_like(flat)
    for i, delta in _backward(flat, arch, inputs, masks, g):
        gW = delta.T @ inputs[i]
        start = arch.offsets[i]
        grad[start : start + gW.size] = gW.ravel()
        grad[start + gW.size : arch.offsets[i + 1]] = delta.sum(axis=0)
    return out, grad


def vjp(params: NetworkParams, X, g) -> GradientBundle:
    """Gradient of ``sum_n g_n f(x_n)`` with respect to every parameter."""
    X, _ = _as_rows(params.arch, X)
    g = np.broadcast_to(np.asarray(g, dtype=float), (X.shape[0],))
    _, grad = value_and_vjp(params.flat, params.arch, X, lambda _: g)
    return GradientBundle(params.arch, grad)


def grad_params(params: NetworkParams, x) -> GradientBundle:
    """Exact gradient of the scalar output at one input.

    The ReLU derivative at exactly zero is taken as zero.
    """
    X, single = _as_rows(params.arch, x)
    if not single:
        raise ShapeError("grad_params takes a single input vector; use jacobian for batches")
    return vjp(params, X, 1.0)


def jacobian(params: NetworkParams, X) -> np.ndarray:
    """Per-row gradients of the output, shape ``(N, n_params)``."""
    arch = params.arch
    X, _ = _as_rows(arch, X)
    inputs, masks, _ = _forward_cache(params.flat, arch, X)
    J = np.empty((X.shape[0], arch.n_params))
    for i, delta in _backward(params.flat, arch, inputs, masks, np.ones(X.shape[0])):
        k, d = delta.shape[1], inputs[i].shape[1]
        start = arch.offsets[i]
        J[:, start : start + k * d] = (delta[:, :, None] * inputs[i][:, None, :]).reshape(len(X), -1)
        J[:, start + k * d : arch.offsets[i + 1]] = delta
    return J


def layer_grad_sq_norms(params: NetworkParams, X) -> np.ndarray:
    """Squared norm of each layer's gradient block at every row, shape ``(N, n_layers)``.

    Uses ``||d f / d(W_i, b_i)||^2 = ||delta_i||^2 (||h_{i-1}||^2 + 1)`` so the
    full Jacobian is never formed.
    """
    arch = params.arch
    X, _ = _as_rows(arch, X)
    inputs, masks, _ = _forward_cache(params.flat, arch, X)
    out = np.empty((X.shape[0], arch.n_layers))
    for i, delta in _backward(params.flat, arch, inputs, masks, np.ones(X.shape[0])):
        out[:, i] = np.sum(delta**2, axis=1) * (np.sum(inputs[i] ** 2, axis=1) + 1.0)
    return out
