"""Reverse-mode automatic differentiation on an append-only tape.

Implements exactly the operations the simulation rollout needs: elementwise
arithmetic, exp/log/tanh/power, reductions, column concatenation and slicing,
a fused affine layer, a fused row softmax, and a floor clamp.  Values are
float64 numpy arrays; broadcasting follows numpy, with gradients summed back
to the operand's shape.

Every helper in this module accepts either a :class:`Var` or a plain
array/scalar and returns a plain value when no tape is involved, so the same
model code runs in recording mode (training) and in fast mode (evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Tape:
    """Append-only record of one computation, walked once backwards."""

    def __init__(self):
        self.nodes = []
        self._leaf_cache = {}

    def append(self, var):
        var.index = len(self.nodes)
        self.nodes.append(var)

    def backward(self, output, seed=1.0):
        """Accumulate gradients of `output` into every node's .grad.

        `seed` is the cotangent of the output (1.0 for a scalar objective).
        Visits each node exactly once in reverse creation order.
        """
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        output.grad = np.broadcast_to(np.asarray(seed, dtype=float),
                                      output.value.shape).copy()
        for node in reversed(self.nodes):
            g = node.grad
            for parent, pull in node.edges:
                parent.grad = parent.grad + pull(g)


class Var:
    """One taped value. Do not construct directly; use Tape-aware ops."""

    # keep numpy from consuming us in mixed expressions so __radd__ etc. fire
    __array_ufunc__ = None

    __slots__ = ("value", "grad", "edges", "tape", "index")

    def __init__(self, value, tape, edges=()):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.edges = list(edges)
        self.tape = tape
        tape.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        return _binary(self, other, np.add,
                       lambda g, xv, yv: g, lambda g, xv, yv: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract,
                       lambda g, xv, yv: g, lambda g, xv, yv: -g)

    def __rsub__(self, other):
        return _binary(other, self, np.subtract,
                       lambda g, xv, yv: g, lambda g, xv, yv: -g)

    def __mul__(self, other):
        return _binary(self, other, np.multiply,
                       lambda g, xv, yv: g * yv, lambda g, xv, yv: g * xv)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide,
                       lambda g, xv, yv: g / yv,
                       lambda g, xv, yv: -g * xv / yv ** 2)

    def __rtruediv__(self, other):
        return _binary(other, self, np.divide,
                       lambda g, xv, yv: g / yv,
                       lambda g, xv, yv: -g * xv / yv ** 2)

    def __neg__(self):
        return self * (-1.0)

    def __pow__(self, q):
        return power(self, q)


def _unbroadcast(g, shape):
    # sum the gradient back onto `shape` after numpy broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] > 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(x, y, fn, pull_x, pull_y):
    xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=float)
    yv = y.value if isinstance(y, Var) else np.asarray(y, dtype=float)
    out_val = fn(xv, yv)
    if not isinstance(x, Var) and not isinstance(y, Var):
        return out_val
    tape = x.tape if isinstance(x, Var) else y.tape
    if isinstance(x, Var) and isinstance(y, Var) and x.tape is not y.tape:
        raise ValueError("operands live on different tapes")
    edges = []
    if isinstance(x, Var):
        edges.append((x, lambda g: _unbroadcast(pull_x(g, xv, yv), xv.shape)))
    if isinstance(y, Var):
        edges.append((y, lambda g: _unbroadcast(pull_y(g, xv, yv), yv.shape)))
    return Var(out_val, tape, edges)


def _unary(x, fn, pull):
    if not isinstance(x, Var):
        return fn(np.asarray(x, dtype=float))
    xv = x.value
    out_val = fn(xv)
    return Var(out_val, x.tape, [(x, lambda g: pull(g, xv, out_val))])


def value(x):
    """Plain numpy value of a Var or pass-through for arrays."""
    return x.value if isinstance(x, Var) else x


def exp(x):
    return _unary(x, np.exp, lambda g, xv, ov: g * ov)


def log(x):
    return _unary(x, np.log, lambda g, xv, ov: g / xv)


def tanh(x):
    return _unary(x, np.tanh, lambda g, xv, ov: g * (1.0 - ov ** 2))


def power(x, q):
    """x**q for a fixed float exponent q (x > 0 when q is fractional)."""
    q = float(q)
    return _unary(x, lambda v: v ** q,
                  lambda g, xv, ov: g * q * xv ** (q - 1.0))


def maximum_floor(x, floor):
    """Clamp from below. Gradient is identity where x > floor, zero where
    the clamp is active (the floor is treated as a constant)."""
    floor = float(floor)
    return _unary(x, lambda v: np.maximum(v, floor),
                  lambda g, xv, ov: g * (xv > floor))


def vsum(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    xv = x.value

    def pull(g, xv=xv, axis=axis):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()

    return Var(np.sum(xv, axis=axis), x.tape, [(x, pull)])


def vmean(x, axis=None):
    if not isinstance(x, Var):
        return np.mean(x, axis=axis)
    xv = x.value
    count = xv.size if axis is None else xv.shape[axis]
    return vsum(x, axis=axis) * (1.0 / count)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    xv = x.value
    return Var(xv.reshape(shape), x.tape,
               [(x, lambda g: g.reshape(xv.shape))])


def concat_cols(parts):
    """Concatenate (B, w_i) blocks along the last axis; parts may mix
    constants and Vars."""
    vals = [value(p) for p in parts]
    out_val = np.concatenate(vals, axis=-1)
    tape = next((p.tape for p in parts if isinstance(p, Var)), None)
    if tape is None:
        return out_val
    edges = []
    offset = 0
    for p, v in zip(parts, vals):
        w = v.shape[-1]
        if isinstance(p, Var):
            edges.append((p, lambda g, a=offset, b=offset + w: g[..., a:b]))
        offset += w
    return Var(out_val, tape, edges)


def col_slice(x, lo, hi):
    if not isinstance(x, Var):
        return x[..., lo:hi]
    xv = x.value

    def pull(g):
        full = np.zeros_like(xv)
        full[..., lo:hi] = g
        return full

    return Var(xv[..., lo:hi], x.tape, [(x, pull)])


def affine(x, w, b):
    """Fused x @ w + b with x: (B, fan_in), w: (fan_in, fan_out), b: (fan_out,)."""
    xv, wv, bv = value(x), value(w), value(b)
    out_val = xv @ wv + bv
    tape = next((t.tape for t in (x, w, b) if isinstance(t, Var)), None)
    if tape is None:
        return out_val
    edges = []
    if isinstance(x, Var):
        edges.append((x, lambda g: g @ wv.T))
    if isinstance(w, Var):
        edges.append((w, lambda g: xv.T @ g))
    if isinstance(b, Var):
        edges.append((b, lambda g: g.sum(axis=0)))
    return Var(out_val, tape, edges)


def softmax(x):
    """Row softmax over the last axis."""

    def fn(v):
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def pull(g, xv, ov):
        return (g - (g * ov).sum(axis=-1, keepdims=True)) * ov

    return _unary(x, fn, pull)


def leaf(val, tape):
    """Register a trainable leaf (parameter) on the tape."""
    return Var(val, tape)


class Mlp:
    """Plain feedforward network: affine layers, tanh hidden activations,
    linear output.

    Parameters are held as numpy arrays; `forward` with a tape lifts them to
    leaves of that tape (cached per tape, so gradients accumulate across
    repeated calls within one recording).
    """

    def __init__(self, layer_dims, weights, biases):
        layer_dims = [int(n) for n in layer_dims]
        if len(weights) != len(layer_dims) - 1 or len(biases) != len(weights):
            raise ValueError("layer count mismatch")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (layer_dims[i], layer_dims[i + 1]):
                raise ValueError(f"weight {i} has shape {w.shape}, expected "
                                 f"{(layer_dims[i], layer_dims[i + 1])}")
            if b.shape != (layer_dims[i + 1],):
                raise ValueError(f"bias {i} has shape {b.shape}")
        self.layer_dims = layer_dims
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]

    @classmethod
    def initialize(cls, layer_dims, rng):
        """Xavier-uniform weights for tanh layers, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases)

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_parameters(self, values):
        n_layers = len(self.weights)
        if len(values) != 2 * n_layers:
            raise ValueError("parameter count mismatch")
        for i in range(n_layers):
            w, b = values[2 * i], values[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError("parameter shape mismatch")
            self.weights[i] = np.asarray(w, dtype=float)
            self.biases[i] = np.asarray(b, dtype=float)

    def parameter_vars(self, tape):
        """Leaf Vars for this net on `tape`, created once per tape."""
        key = id(self)
        if key not in tape._leaf_cache:
            tape._leaf_cache[key] = [leaf(p, tape) for p in self.parameters()]
        return tape._leaf_cache[key]

    def clone(self):
        return Mlp(self.layer_dims, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])


def forward(net, x, tape=None):
    """Run `net` on input rows x of shape (B, layer_dims[0]) (or a single
    vector); records on `tape` when given, otherwise pure numpy.

    Returns the output rows, a Var iff the pass was recorded or x is a Var.
    """
    xv = value(x)
    squeeze = False
    if np.ndim(xv) == 1:
        x = reshape(x, (1, -1)) if isinstance(x, Var) else xv.reshape(1, -1)
        xv = value(x)
        squeeze = True
    if xv.shape[-1] != net.layer_dims[0]:
        raise ValueError(f"input width {xv.shape[-1]} != expected "
                         f"{net.layer_dims[0]}")
    if tape is not None:
        params = net.parameter_vars(tape)
        pairs = [(params[2 * i], params[2 * i + 1])
                 for i in range(len(net.weights))]
    else:
        pairs = list(zip(net.weights, net.biases))
    h = x
    last = len(pairs) - 1
    for i, (w, b) in enumerate(pairs):
        h = affine(h, w, b)
        if i < last:
            h = tanh(h)
    if squeeze:
        h = reshape(h, (net.layer_dims[-1],)) if isinstance(h, Var) \
            else value(h).reshape(net.layer_dims[-1])
    return h


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for Adam."""

    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], lr=lr)


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns (new_params, state).

    `grads` are gradients of the loss being minimized. The state's moment
    buffers are updated in place and the step counter is incremented.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient count mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g ** 2
        m_hat = state.m[i] / (1.0 - b1 ** state.t)
        v_hat = state.v[i] / (1.0 - b2 ** state.t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out, state


WEIGHTS_MAGIC = "MFGNET v1"


class WeightsFormatError(ValueError):
    """Raised when a weights file cannot be parsed."""


class WeightsVersionError(WeightsFormatError):
    """Raised when a weights file declares an unsupported version."""


def save_weights(net, path):
    """Write the network to a text file (bit-exact float64 round trip).

    Line 1: magic+version, line 2: layer dims, then one line per parameter
    tensor (weights and bias alternating, row-major).
    """
    lines = [WEIGHTS_MAGIC, " ".join(str(n) for n in net.layer_dims)]
    for p in net.parameters():
        lines.append(" ".join(repr(float(x)) for x in p.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_weights(path):
    """Parse a weights file written by `save_weights` back into an Mlp."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise WeightsFormatError("line 1: empty file")
    if lines[0] != WEIGHTS_MAGIC:
        if lines[0].startswith("MFGNET"):
            raise WeightsVersionError(
                f"line 1: unsupported version {lines[0]!r}, "
                f"expected {WEIGHTS_MAGIC!r}")
        raise WeightsFormatError(f"line 1: bad magic {lines[0]!r}")
    if len(lines) < 2:
        raise WeightsFormatError("line 2: missing layer dims")
    try:
        dims = [int(tok) for tok in lines[1].split()]
    except ValueError as err:
        raise WeightsFormatError(f"line 2: {err}") from None
    if len(dims) < 2 or any(n <= 0 for n in dims):
        raise WeightsFormatError(f"line 2: bad layer dims {dims}")
    shapes = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        shapes.append((fan_in, fan_out))
        shapes.append((fan_out,))
    expected_lines = 2 + len(shapes)
    if len(lines) != expected_lines:
        raise WeightsFormatError(
            f"line {min(len(lines), expected_lines) + 1}: expected "
            f"{expected_lines} lines total, found {len(lines)}")
    tensors = []
    for k, shape in enumerate(shapes):
        lineno = 3 + k
        toks = lines[2 + k].split()
        n_expected = int(np.prod(shape))
        if len(toks) != n_expected:
            raise WeightsFormatError(
                f"line {lineno}: expected {n_expected} values, "
                f"found {len(toks)}")
        try:
            flat = np.array([float(t) for t in toks])
        except ValueError as err:
            raise WeightsFormatError(f"line {lineno}: {err}") from None
        tensors.append(flat.reshape(shape))
    return Mlp(dims, tensors[0::2], tensors[1::2])
