"""Differentiable evaluation of scalar-output networks.

A network evaluation is recorded as a :class:`Trace`: an ordered, acyclic
list of elementary operations (affine combine, activation apply, add,
multiply, closed-form factor) ending in a single scalar-per-sample output.
Traces are built once per architecture and then executed on batches of
points.

Execution carries "streams" through every node, stacked on the leading
axis of each value array (shape ``(S, batch, width)``):

* stream 0                      : the value itself
* streams ``1..d``              : first derivatives w.r.t. each input
                                  coordinate (forward propagation)
* stream ``d+1`` (mode "lap")   : the pure-second-derivative sum, i.e. the
                                  Laplacian contribution

First and second input derivatives are therefore exact forward-mode
quantities (d is at most 3 here, so this costs a few extra streams), while
parameter gradients come from one reverse pass over the same trace.  The
reverse pass also differentiates the gradient/Laplacian streams, which is
what parameter gradients of PDE residuals need; activation third
derivatives are the deepest rule this requires.

Traces hold no run state: one execution keeps everything in a
:class:`RunState`, so concurrent evaluations on shared parameters are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .activations import Kind, kind_by_code
from .errors import (DimensionError, NumericOverflowError, ParameterError,
                     UnsupportedDerivativeError)

VALUE = 0  # stream index of the plain value


# ---------------------------------------------------------------------------
# parameter bookkeeping


class ParamLayout:
    """Fixed, ordered flattening of every trainable array.

    The ordering is canonical for a given architecture (registration
    order: layer-major, weights before biases before activation banks),
    so kernel rows and optimizer state line up across calls.
    """

    def __init__(self):
        self._names: list[str] = []
        self._shapes: dict[str, tuple[int, ...]] = {}
        self._offsets: dict[str, int] = {}
        self.size = 0

    def add(self, name: str, shape) -> str:
        if name in self._shapes:
            raise ParameterError(f"duplicate parameter name '{name}'")
        shape = tuple(int(s) for s in shape)
        self._names.append(name)
        self._shapes[name] = shape
        self._offsets[name] = self.size
        self.size += int(np.prod(shape)) if shape else 1
        return name

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    def offset(self, name: str) -> int:
        return self._offsets[name]

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        off = self._offsets[name]
        shp = self._shapes[name]
        n = int(np.prod(shp)) if shp else 1
        return flat[off:off + n].reshape(shp)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def pack(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        flat = self.zeros()
        for name in self._names:
            self.view(flat, name)[...] = arrays[name]
        return flat


# ---------------------------------------------------------------------------
# elementary operations


class Op:
    out: int

    def forward(self, st: "RunState", flat: np.ndarray) -> None:
        raise NotImplementedError

    def backward(self, st: "RunState", flat: np.ndarray, adj: list,
                 grad: "_GradSink") -> None:
        raise NotImplementedError


def _acc(adj: list, slot: int, value: np.ndarray, like: np.ndarray) -> None:
    if adj[slot] is None:
        adj[slot] = np.zeros_like(like)
    adj[slot] += value


class _GradSink:
    """Collects parameter gradients, either summed over the batch or one
    row per sample (the Jacobian used for kernel assembly)."""

    def __init__(self, layout: ParamLayout, batch: int, per_sample: bool):
        self.layout = layout
        self.per_sample = per_sample
        if per_sample:
            self.data = np.zeros((batch, layout.size))
        else:
            self.data = np.zeros(layout.size)

    def slot(self, name: str) -> np.ndarray:
        off = self.layout.offset(name)
        shp = self.layout.shape(name)
        n = int(np.prod(shp)) if shp else 1
        if self.per_sample:
            return self.data[:, off:off + n]
        return self.data[off:off + n]


@dataclass
class Affine(Op):
    """y = x @ W.T (+ b on the value stream)."""

    out: int
    x: int
    w_name: str
    b_name: Optional[str] = None

    def forward(self, st, flat):
        xv = st.values[self.x]
        S, B, n_in = xv.shape
        W = st.trace.layout.view(flat, self.w_name)
        y = (xv.reshape(S * B, n_in) @ W.T).reshape(S, B, W.shape[0])
        if self.b_name is not None:
            y[VALUE] += st.trace.layout.view(flat, self.b_name)
        st.values[self.out] = y

    def backward(self, st, flat, adj, grad):
        a = adj[self.out]
        if a is None:
            return
        xv = st.values[self.x]
        S, B, n_in = xv.shape
        W = st.trace.layout.view(flat, self.w_name)
        n_out = W.shape[0]
        _acc(adj, self.x, (a.reshape(S * B, n_out) @ W).reshape(S, B, n_in), xv)
        gw = grad.slot(self.w_name)
        if grad.per_sample:
            gw += np.einsum("sbi,sbj->bij", a, xv).reshape(B, -1)
        else:
            gw += (a.reshape(S * B, n_out).T @ xv.reshape(S * B, n_in)).ravel()
        if self.b_name is not None:
            gb = grad.slot(self.b_name)
            if grad.per_sample:
                gb += a[VALUE]
            else:
                gb += a[VALUE].sum(axis=0)


@dataclass
class ActLayer(Op):
    """Per-neuron basic-activation apply with fixed or trainable scales.

    Neurons are grouped by kind; each group evaluates its derivative table
    on its own columns.
    """

    out: int
    x: int
    codes: np.ndarray
    scales: np.ndarray = None           # fixed scales, shape (width,)
    scale_name: Optional[str] = None    # or a trainable scale bank
    groups: list = field(default_factory=list)

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        self.codes = codes
        self.groups = []
        for code in np.unique(codes):
            idx = np.nonzero(codes == code)[0]
            self.groups.append((kind_by_code(int(code)), idx))
        if self.scales is not None:
            self.scales = np.asarray(self.scales, dtype=float)

    def _scales(self, st, flat):
        if self.scale_name is not None:
            return st.trace.layout.view(flat, self.scale_name)
        return self.scales

    def _deriv(self, st, flat, z0, order):
        """Order-th derivative of the scaled activation, all neurons."""
        s = self._scales(st, flat)
        out = np.empty_like(z0)
        for kind, idx in self.groups:
            out[:, idx] = kind.apply(z0[:, idx], s[idx], order)
        return out

    def forward(self, st, flat):
        xv = st.values[self.x]
        S = xv.shape[0]
        d = st.trace.d
        z0 = xv[VALUE]
        y = np.empty_like(xv)
        y[VALUE] = self._deriv(st, flat, z0, 0)
        aux = {}
        if S > 1:
            D1 = self._deriv(st, flat, z0, 1)
            aux["D1"] = D1
            for k in range(1, 1 + d):
                np.multiply(D1, xv[k], out=y[k])
            if S == d + 2:
                D2 = self._deriv(st, flat, z0, 2)
                Q = np.square(xv[1])
                for k in range(2, 1 + d):
                    Q += np.square(xv[k])
                aux["D2"] = D2
                aux["Q"] = Q
                y[d + 1] = D2 * Q + D1 * xv[d + 1]
        st.values[self.out] = y
        st.aux[self._op_index] = aux

    def backward(self, st, flat, adj, grad):
        a = adj[self.out]
        if a is None:
            return
        xv = st.values[self.x]
        S = xv.shape[0]
        d = st.trace.d
        z0 = xv[VALUE]
        aux = st.aux[self._op_index]
        xbar = np.zeros_like(xv)
        if S == 1:
            D1 = self._deriv(st, flat, z0, 1)
            xbar[VALUE] = a[VALUE] * D1
        else:
            D1 = aux["D1"]
            D2 = self._deriv(st, flat, z0, 2) if "D2" not in aux else aux["D2"]
            g0 = a[VALUE] * D1
            mix = a[1] * xv[1]
            for k in range(2, 1 + d):
                mix += a[k] * xv[k]
            g0 += D2 * mix
            for k in range(1, 1 + d):
                xbar[k] = a[k] * D1
            if S == d + 2:
                D3 = self._deriv(st, flat, z0, 3)
                Q = aux["Q"]
                aL = a[d + 1]
                g0 += aL * (D3 * Q + D2 * xv[d + 1])
                for k in range(1, 1 + d):
                    xbar[k] += aL * (2.0 * D2) * xv[k]
                xbar[d + 1] = aL * D1
            xbar[VALUE] = g0
        _acc(adj, self.x, xbar, xv)
        if self.scale_name is not None:
            self._scale_grad(st, flat, a, xv, grad)

    def _dscale(self, st, flat, z0, order):
        s = self._scales(st, flat)
        out = np.empty_like(z0)
        for kind, idx in self.groups:
            out[:, idx] = kind.dscale(z0[:, idx], s[idx], order)
        return out

    def _scale_grad(self, st, flat, a, xv, grad):
        S = xv.shape[0]
        d = st.trace.d
        z0 = xv[VALUE]
        total = a[VALUE] * self._dscale(st, flat, z0, 0)
        if S > 1:
            dS1 = self._dscale(st, flat, z0, 1)
            for k in range(1, 1 + d):
                total += a[k] * dS1 * xv[k]
            if S == d + 2:
                dS2 = self._dscale(st, flat, z0, 2)
                Q = st.aux[self._op_index]["Q"]
                total += a[d + 1] * (dS2 * Q + dS1 * xv[d + 1])
        gs = grad.slot(self.scale_name)
        if grad.per_sample:
            gs += total
        else:
            gs += total.sum(axis=0)


@dataclass
class MulVec(Op):
    """y = x * p, p a per-neuron coefficient bank (same for every stream)."""

    out: int
    x: int
    p_name: str

    def forward(self, st, flat):
        p = st.trace.layout.view(flat, self.p_name)
        st.values[self.out] = st.values[self.x] * p

    def backward(self, st, flat, adj, grad):
        a = adj[self.out]
        if a is None:
            return
        xv = st.values[self.x]
        p = st.trace.layout.view(flat, self.p_name)
        _acc(adj, self.x, a * p, xv)
        gp = grad.slot(self.p_name)
        contrib = a * xv
        if grad.per_sample:
            gp += contrib.sum(axis=0)
        else:
            gp += contrib.sum(axis=(0, 1))


@dataclass
class Add(Op):
    out: int
    a: int
    b: int

    def forward(self, st, flat):
        st.values[self.out] = st.values[self.a] + st.values[self.b]

    def backward(self, st, flat, adj, grad):
        g = adj[self.out]
        if g is None:
            return
        _acc(adj, self.a, g, st.values[self.a])
        _acc(adj, self.b, g, st.values[self.b])


@dataclass
class AffineConst(Op):
    """y = c * x, plus a constant shift on the value stream."""

    out: int
    x: int
    c: float
    shift: float = 0.0

    def forward(self, st, flat):
        y = self.c * st.values[self.x]
        if self.shift:
            y[VALUE] += self.shift
        st.values[self.out] = y

    def backward(self, st, flat, adj, grad):
        g = adj[self.out]
        if g is None:
            return
        _acc(adj, self.x, self.c * g, st.values[self.x])


@dataclass
class Mul(Op):
    """Elementwise product of two nodes with the full product rule across
    streams.  Operands must share shape."""

    out: int
    a: int
    b: int

    def forward(self, st, flat):
        av = st.values[self.a]
        bv = st.values[self.b]
        S = av.shape[0]
        d = st.trace.d
        y = np.empty_like(av)
        y[VALUE] = av[VALUE] * bv[VALUE]
        if S > 1:
            for k in range(1, 1 + d):
                y[k] = av[k] * bv[VALUE] + av[VALUE] * bv[k]
            if S == d + 2:
                cross = av[1] * bv[1]
                for k in range(2, 1 + d):
                    cross += av[k] * bv[k]
                y[d + 1] = (av[d + 1] * bv[VALUE] + av[VALUE] * bv[d + 1]
                            + 2.0 * cross)
        st.values[self.out] = y

    def backward(self, st, flat, adj, grad):
        g = adj[self.out]
        if g is None:
            return
        av = st.values[self.a]
        bv = st.values[self.b]
        S = av.shape[0]
        d = st.trace.d
        for (u, v, slot) in ((av, bv, self.b), (bv, av, self.a)):
            # adjoint of v given the other operand u
            vbar = np.empty_like(v)
            t = g[VALUE] * u[VALUE]
            if S > 1:
                for k in range(1, 1 + d):
                    t += g[k] * u[k]
                if S == d + 2:
                    t += g[d + 1] * u[d + 1]
                    for k in range(1, 1 + d):
                        vbar[k] = g[k] * u[VALUE] + 2.0 * g[d + 1] * u[k]
                    vbar[d + 1] = g[d + 1] * u[VALUE]
                else:
                    for k in range(1, 1 + d):
                        vbar[k] = g[k] * u[VALUE]
            vbar[VALUE] = t
            _acc(adj, slot, vbar, v)


class ClosedFormFn:
    """Closed-form scalar field with analytic input derivatives.

    Subclasses implement ``value(x) -> (B,)`` and, when used in derivative
    modes, ``grad(x) -> (B, d)`` and ``hess_diag(x) -> (B, d)`` (the pure
    second derivatives)."""

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise UnsupportedDerivativeError(
            f"{type(self).__name__} supplies no input gradient")

    def hess_diag(self, x):
        raise UnsupportedDerivativeError(
            f"{type(self).__name__} supplies no second derivatives")


@dataclass
class ClosedForm(Op):
    """A parameter-free factor evaluated straight from the raw input
    coordinates; its streams come from the analytic derivatives."""

    out: int
    fn: ClosedFormFn
    full_streams: bool = True

    def forward(self, st, flat):
        B = st.x.shape[0]
        d = st.trace.d
        S = st.S if self.full_streams else 1
        y = np.zeros((S, B, 1))
        y[VALUE, :, 0] = self.fn.value(st.x)
        if S > 1:
            gr = self.fn.grad(st.x)
            for k in range(d):
                y[1 + k, :, 0] = gr[:, k]
            if S == d + 2:
                y[d + 1, :, 0] = self.fn.hess_diag(st.x).sum(axis=1)
        st.values[self.out] = y

    def backward(self, st, flat, adj, grad):
        pass  # no parameters, and input adjoints are never consumed


@dataclass
class Pick(Op):
    """Extract one stream of a node as a new single-stream value."""

    out: int
    x: int
    which: str          # "value" | "grad" | "lap"
    k: int = 0          # coordinate index for "grad"

    def _index(self, st):
        if self.which == "value":
            return VALUE
        if self.which == "grad":
            return 1 + self.k
        if self.which == "lap":
            return 1 + st.trace.d
        raise ParameterError(f"unknown stream '{self.which}'")

    def forward(self, st, flat):
        idx = self._index(st)
        xv = st.values[self.x]
        if idx >= xv.shape[0]:
            raise UnsupportedDerivativeError(
                f"stream '{self.which}' requires a derivative-mode run")
        st.values[self.out] = xv[idx:idx + 1].copy()

    def backward(self, st, flat, adj, grad):
        g = adj[self.out]
        if g is None:
            return
        xv = st.values[self.x]
        if adj[self.x] is None:
            adj[self.x] = np.zeros_like(xv)
        adj[self.x][self._index(st)] += g[0]


# ---------------------------------------------------------------------------
# trace


class Trace:
    """Ordered record of the elementary operations of one forward pass."""

    def __init__(self, d: int):
        self.d = int(d)
        self.ops: list[Op] = []
        self.layout = ParamLayout()
        self.n_slots = 1  # slot 0 is the input
        self.out = 0

    # -- construction helpers (used by the network builders) --------------

    def _new_slot(self) -> int:
        s = self.n_slots
        self.n_slots += 1
        return s

    def _append(self, op: Op) -> int:
        op._op_index = len(self.ops)
        self.ops.append(op)
        self.out = op.out
        return op.out

    def add_param(self, name: str, shape) -> str:
        return self.layout.add(name, shape)

    def affine(self, x: int, w_name: str, b_name: Optional[str] = None) -> int:
        return self._append(Affine(self._new_slot(), x, w_name, b_name))

    def act(self, x: int, codes, scales=None, scale_name=None) -> int:
        return self._append(ActLayer(self._new_slot(), x, codes, scales, scale_name))

    def mul_vec(self, x: int, p_name: str) -> int:
        return self._append(MulVec(self._new_slot(), x, p_name))

    def add(self, a: int, b: int) -> int:
        return self._append(Add(self._new_slot(), a, b))

    def affine_const(self, x: int, c: float, shift: float = 0.0) -> int:
        return self._append(AffineConst(self._new_slot(), x, c, shift))

    def mul(self, a: int, b: int) -> int:
        return self._append(Mul(self._new_slot(), a, b))

    def closed_form(self, fn: ClosedFormFn, full_streams: bool = True) -> int:
        return self._append(ClosedForm(self._new_slot(), fn, full_streams))

    def pick(self, x: int, which: str, k: int = 0) -> int:
        return self._append(Pick(self._new_slot(), x, which, k))

    def extended(self) -> "Trace":
        """A shallow copy sharing ops and layout, for appending wrap or
        residual nodes without mutating the original."""
        t = Trace(self.d)
        t.ops = list(self.ops)
        t.layout = self.layout
        t.n_slots = self.n_slots
        t.out = self.out
        for i, op in enumerate(t.ops):
            op._op_index = i
        return t

    def validate(self) -> None:
        seen = {0}
        outs = set()
        for op in self.ops:
            for attr in ("x", "a", "b"):
                s = getattr(op, attr, None)
                if isinstance(s, int) and s not in seen:
                    raise ParameterError("trace references a slot before it is produced")
            if op.out in outs:
                raise ParameterError("trace writes a slot twice")
            outs.add(op.out)
            seen.add(op.out)


# ---------------------------------------------------------------------------
# execution


MODES = {"value": 1, "grad": 2, "lap": 3}  # stream count is 1, 1+d, 2+d


class RunState:
    def __init__(self, trace: Trace, x: np.ndarray, mode: str):
        self.trace = trace
        self.x = x
        self.mode = mode
        d = trace.d
        self.S = {"value": 1, "grad": 1 + d, "lap": 2 + d}[mode]
        self.values: list[Optional[np.ndarray]] = [None] * trace.n_slots
        self.aux: list = [None] * len(trace.ops)

    def output(self) -> np.ndarray:
        return self.trace_out()[VALUE, :, 0]

    def trace_out(self) -> np.ndarray:
        return self.values[self.trace.out]


def _as_batch(trace: Trace, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != trace.d:
        raise DimensionError(
            f"expected points with {trace.d} coordinates, got shape {x.shape}")
    return x


def run(trace: Trace, flat: np.ndarray, x, mode: str = "value",
        check_finite: bool = False) -> RunState:
    x = _as_batch(trace, x)
    if mode not in MODES:
        raise ParameterError(f"unknown run mode '{mode}'")
    st = RunState(trace, x, mode)
    B, d = x.shape
    seed = np.zeros((st.S, B, d))
    seed[VALUE] = x
    for k in range(d):
        if st.S > 1:
            seed[1 + k, :, k] = 1.0
    st.values[0] = seed
    for op in trace.ops:
        op.forward(st, flat)
        if check_finite and not np.all(np.isfinite(st.values[op.out])):
            raise NumericOverflowError(
                f"non-finite intermediate at op {op._op_index} ({type(op).__name__})")
    return st


def reverse(trace: Trace, flat: np.ndarray, st: RunState, seed: np.ndarray,
            per_sample: bool = False) -> np.ndarray:
    """Reverse pass from the output's value stream.

    ``seed`` has shape (batch,); returns the flat parameter gradient, or a
    (batch, n_params) Jacobian when ``per_sample``.
    """
    B = st.x.shape[0]
    adj: list[Optional[np.ndarray]] = [None] * trace.n_slots
    out_adj = np.zeros_like(st.values[trace.out])
    out_adj[VALUE, :, 0] = seed
    adj[trace.out] = out_adj
    sink = _GradSink(trace.layout, B, per_sample)
    for op in reversed(trace.ops):
        op.backward(st, flat, adj, sink)
    return sink.data


# ---------------------------------------------------------------------------
# point-level API


def evaluate(trace: Trace, flat: np.ndarray, x, check_finite: bool = True) -> np.ndarray:
    """Network values at a batch of points, shape (batch,)."""
    st = run(trace, flat, x, "value", check_finite=check_finite)
    return st.output()


def eval_point(trace: Trace, flat: np.ndarray, x) -> float:
    return float(evaluate(trace, flat, np.asarray(x, dtype=float)[None, :]
                          if np.ndim(x) == 1 else x)[0])


def param_gradient(trace: Trace, flat: np.ndarray, x) -> np.ndarray:
    """Gradient of the output w.r.t. every trainable parameter, canonical
    ordering, at a single point."""
    x = _as_batch(trace, x)
    if x.shape[0] != 1:
        raise DimensionError("param_gradient takes a single point")
    st = run(trace, flat, x, "value")
    return reverse(trace, flat, st, np.ones(1))


def param_jacobian(trace: Trace, flat: np.ndarray, x, mode: str = "value") -> np.ndarray:
    """Rows of per-sample parameter gradients, shape (batch, n_params)."""
    x = _as_batch(trace, x)
    st = run(trace, flat, x, mode)
    return reverse(trace, flat, st, np.ones(x.shape[0]), per_sample=True)


def input_gradient(trace: Trace, flat: np.ndarray, x) -> np.ndarray:
    x = _as_batch(trace, x)
    st = run(trace, flat, x, "grad")
    out = st.trace_out()
    g = out[1:1 + trace.d, :, 0]
    return g[:, 0] if x.shape[0] == 1 else g.T


def input_laplacian(trace: Trace, flat: np.ndarray, x):
    x = _as_batch(trace, x)
    st = run(trace, flat, x, "lap")
    out = st.trace_out()
    lap = out[1 + trace.d, :, 0]
    return float(lap[0]) if x.shape[0] == 1 else lap


def fd_oracle(trace: Trace, flat: np.ndarray, x, h: float):
    """Central-difference gradient and Laplacian at a single point.

    Test oracle only; independent of the derivative streams.
    """
    if h <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    x = _as_batch(trace, x)
    if x.shape[0] != 1:
        raise DimensionError("fd_oracle takes a single point")
    d = trace.d
    pts = [x[0]]
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        pts.append(x[0] + e)
        pts.append(x[0] - e)
    vals = evaluate(trace, flat, np.stack(pts), check_finite=False)
    f0 = vals[0]
    grad = np.empty(d)
    lap = 0.0
    for k in range(d):
        fp, fm = vals[1 + 2 * k], vals[2 + 2 * k]
        grad[k] = (fp - fm) / (2.0 * h)
        lap += (fp - 2.0 * f0 + fm) / (h * h)
    return grad, lap


def fd_param_gradient(trace: Trace, flat: np.ndarray, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference parameter gradient (test oracle)."""
    if h <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    x = _as_batch(trace, x)
    g = np.empty(trace.layout.size)
    for i in range(trace.layout.size):
        fp = flat.copy()
        fp[i] += h
        fm = flat.copy()
        fm[i] -= h
        g[i] = (evaluate(trace, fp, x, check_finite=False)[0]
                - evaluate(trace, fm, x, check_finite=False)[0]) / (2.0 * h)
    return g
