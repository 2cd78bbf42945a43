"""Basic activation functions and per-neuron mixed activations.

Each basic function gamma is evaluable on all finite reals and carries its
derivatives up to third order, which is what reverse-mode differentiation of
a Laplacian requires.  Two parameterized families exist:

* scaled argument:   a(z; s) = gamma(s * z)          (default for every kind)
* bandwidth form:    a(z; b) = exp(-z^2 / (2 b^2))   (kind "gaussian-bw")

The bandwidth form is kept as a distinct kind because its scale parameter
enters the formula differently, so its scale gradient is not the scaled-
argument one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericOverflowError, ParameterError, UnsupportedDerivativeError

LN2 = math.log(2.0)

# |argument| guard for 2^x; beyond this the value overflows float64 ranges
# long before training could recover.
POW2_ARG_LIMIT = 64.0


class Kind:
    """One basic activation function.

    ``max_order`` is the highest z-derivative the kind supplies (0 for the
    discontinuous kinds, 3 for everything differentiable; ReLU family uses
    the a.e. weak derivatives).
    """

    def __init__(self, name: str, code: int, derivs: Sequence[Callable], max_order: int,
                 smooth: bool):
        self.name = name
        self.code = code
        self._derivs = tuple(derivs)
        self.max_order = max_order
        self.smooth = smooth

    def __repr__(self):
        return f"Kind({self.name})"

    def gamma(self, t, order: int):
        if order > self.max_order:
            raise UnsupportedDerivativeError(
                f"activation '{self.name}' has no derivative of order {order}")
        return self._derivs[order](t)

    # scaled-argument family: a(z; s) = gamma(s z)
    def apply(self, z, scale, order: int):
        t = scale * z
        if self.name == "pow2" and np.any(np.abs(t) > POW2_ARG_LIMIT):
            raise NumericOverflowError(
                f"pow2 argument exceeds |x| <= {POW2_ARG_LIMIT:g}")
        if order == 0:
            return self.gamma(t, 0)
        return scale ** order * self.gamma(t, order)

    def dscale(self, z, scale, order: int):
        """d/d(scale) of the order-th z-derivative of a(z; scale)."""
        t = scale * z
        g_next = self.gamma(t, order + 1)
        if order == 0:
            return z * g_next
        return (order * scale ** (order - 1) * self.gamma(t, order)
                + scale ** order * z * g_next)


class _BandwidthGaussian(Kind):
    """a(z; b) = exp(-z^2 / (2 b^2)); scale parameter is the bandwidth b."""

    def __init__(self, code: int):
        super().__init__("gaussian-bw", code, (), max_order=3, smooth=True)

    def gamma(self, t, order: int):  # pragma: no cover - not meaningful alone
        raise UnsupportedDerivativeError(
            "gaussian-bw has no unscaled form; use apply()")

    def apply(self, z, scale, order: int):
        w = 1.0 / (scale * scale)
        g = np.exp(-0.5 * w * z * z)
        if order == 0:
            return g
        if order == 1:
            return -w * z * g
        if order == 2:
            return (w * w * z * z - w) * g
        if order == 3:
            return (3.0 * w * w * z - w ** 3 * z ** 3) * g
        raise UnsupportedDerivativeError(
            f"gaussian-bw has no derivative of order {order}")

    def dscale(self, z, scale, order: int):
        w = 1.0 / (scale * scale)
        b3 = scale ** 3
        g = np.exp(-0.5 * w * z * z)
        if order == 0:
            return (z * z / b3) * g
        if order == 1:
            return (z / b3) * (2.0 - w * z * z) * g
        if order == 2:
            return (w * w * z ** 4 - 5.0 * w * z * z + 2.0) / b3 * g
        raise UnsupportedDerivativeError(
            f"gaussian-bw scale gradient of z-derivative order {order}")


def _relu(t):
    return np.maximum(t, 0.0)


def _relu_d1(t):
    return (np.asarray(t) > 0).astype(float)


def _zero(t):
    return np.zeros_like(np.asarray(t, dtype=float))


def _one(t):
    return np.ones_like(np.asarray(t, dtype=float))


def _gauss(t):
    return np.exp(-np.square(t))


def _step(t):
    # sigma3: indicator of frac(t) >= 1/2
    f = np.asarray(t) - np.floor(t)
    return (f >= 0.5).astype(float)


_REGISTRY: dict[str, Kind] = {}


def _register(kind: Kind) -> Kind:
    _REGISTRY[kind.name] = kind
    return kind


IDENTITY = _register(Kind("identity", 0, (
    lambda t: np.asarray(t, dtype=float) + 0.0, _one, _zero, _zero), 3, True))
SQUARE = _register(Kind("square", 1, (
    np.square, lambda t: 2.0 * np.asarray(t, dtype=float), lambda t: _one(t) * 2.0, _zero), 3, True))
SINE = _register(Kind("sine", 2, (
    np.sin, np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t)), 3, True))
COSINE = _register(Kind("cosine", 3, (
    np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t), np.sin), 3, True))
GAUSSIAN = _register(Kind("gaussian", 4, (
    _gauss,
    lambda t: -2.0 * t * _gauss(t),
    lambda t: (4.0 * t * t - 2.0) * _gauss(t),
    lambda t: (12.0 * t - 8.0 * t ** 3) * _gauss(t)), 3, True))
GAUSSIAN_BW = _register(_BandwidthGaussian(5))
RELU = _register(Kind("relu", 6, (
    _relu, _relu_d1, _zero, _zero), 3, False))
RELU3 = _register(Kind("relu3", 7, (
    lambda t: _relu(t) ** 3,
    lambda t: 3.0 * t * t * _relu_d1(t),
    lambda t: 6.0 * t * _relu_d1(t),
    lambda t: 6.0 * _relu_d1(t)), 3, False))
FLOOR = _register(Kind("floor", 8, (np.floor,), 0, False))
POW2 = _register(Kind("pow2", 9, (
    lambda t: np.exp2(t),
    lambda t: LN2 * np.exp2(t),
    lambda t: LN2 ** 2 * np.exp2(t),
    lambda t: LN2 ** 3 * np.exp2(t)), 3, True))
STEP = _register(Kind("step", 10, (_step,), 0, False))

_ALIASES = {
    "x": "identity", "id": "identity",
    "x2": "square", "x^2": "square",
    "sin": "sine", "cos": "cosine",
    "gauss": "gaussian", "exp(-x^2)": "gaussian",
    "relu^3": "relu3",
    "sigma1": "floor", "sigma2": "pow2", "sigma3": "step",
}


def get_kind(name) -> Kind:
    if isinstance(name, Kind):
        return name
    key = str(name).lower()
    key = _ALIASES.get(key, key)
    if key not in _REGISTRY:
        raise ParameterError(f"unknown activation kind '{name}'")
    return _REGISTRY[key]


def all_kinds() -> tuple[Kind, ...]:
    return tuple(_REGISTRY.values())


def eval_basic(kind, x, order: int = 0):
    """Evaluate a basic activation (or one of its derivatives) at x."""
    k = get_kind(kind)
    if k is GAUSSIAN_BW:
        return k.apply(x, 1.0, order)
    if k.name == "pow2" and np.any(np.abs(np.asarray(x, dtype=float)) > POW2_ARG_LIMIT):
        raise NumericOverflowError(f"pow2 argument exceeds |x| <= {POW2_ARG_LIMIT:g}")
    return k.gamma(np.asarray(x, dtype=float), order)


# ---------------------------------------------------------------------------
# distribution descriptors used for initialization


@dataclass(frozen=True)
class Dist:
    """normal(mu, sigma), uniform(a, b), or const(v)."""

    family: str
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.family == "normal":
            if self.b < 0:
                raise ParameterError(f"normal sigma must be >= 0, got {self.b}")
        elif self.family == "uniform":
            if self.a > self.b:
                raise ParameterError(
                    f"uniform bounds must satisfy a <= b, got ({self.a}, {self.b})")
        elif self.family != "const":
            raise ParameterError(f"unknown distribution family '{self.family}'")

    def sample(self, rng: np.random.Generator, size=None):
        if self.family == "normal":
            return rng.normal(self.a, self.b, size=size)
        if self.family == "uniform":
            return rng.uniform(self.a, self.b, size=size)
        out = np.full(size, self.a, dtype=float) if size is not None else float(self.a)
        return out


def normal(mu: float, sigma: float) -> Dist:
    return Dist("normal", mu, sigma)


def uniform(a: float, b: float) -> Dist:
    return Dist("uniform", a, b)


def const(v: float) -> Dist:
    return Dist("const", v)


# ---------------------------------------------------------------------------
# per-neuron mixed activation


@dataclass(frozen=True)
class RafTerm:
    kind: Kind
    alpha: float
    beta: float


@dataclass(frozen=True)
class RafSpec:
    """sigma(x) = sum_p alpha_p * gamma_p(beta_p * x) for one neuron."""

    terms: tuple[RafTerm, ...]
    trainable_alpha: bool = True
    trainable_beta: bool = True

    def __post_init__(self):
        if len(self.terms) < 1:
            raise ParameterError("a mixed activation needs at least one term")
        for t in self.terms:
            if not (math.isfinite(t.alpha) and math.isfinite(t.beta)):
                raise ParameterError("non-finite alpha/beta in activation spec")


def eval_raf(raf: RafSpec, x):
    x = np.asarray(x, dtype=float)
    total = np.zeros_like(x)
    for t in raf.terms:
        total = total + t.alpha * t.kind.apply(x, t.beta, 0)
    return total if total.ndim else float(total)


def raf_derivatives(raf: RafSpec, x):
    """Return (value, d/dx, d2/dx2) of the mixed activation at x."""
    x = np.asarray(x, dtype=float)
    v = np.zeros_like(x)
    d1 = np.zeros_like(x)
    d2 = np.zeros_like(x)
    for t in raf.terms:
        v = v + t.alpha * t.kind.apply(x, t.beta, 0)
        d1 = d1 + t.alpha * t.kind.apply(x, t.beta, 1)
        d2 = d2 + t.alpha * t.kind.apply(x, t.beta, 2)
    if v.ndim:
        return v, d1, d2
    return float(v), float(d1), float(d2)


def init_raf(template, seed_or_rng) -> RafSpec:
    """Sample a RafSpec from per-term (kind, alpha_dist, beta_dist) entries.

    Reproducible: the same seed yields the same spec.
    """
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    terms = []
    for kind, alpha_dist, beta_dist in template:
        terms.append(RafTerm(get_kind(kind),
                             float(alpha_dist.sample(rng)),
                             float(beta_dist.sample(rng))))
    return RafSpec(tuple(terms))


# ---------------------------------------------------------------------------
# partition mode: one fixed basic activation per neuron, round-robin


@dataclass(frozen=True)
class PartitionAssignment:
    """Per-neuron activation kinds and fixed scalings for one layer."""

    codes: np.ndarray   # int kind codes, shape (width,)
    scales: np.ndarray  # float, shape (width,)

    @property
    def width(self) -> int:
        return self.codes.shape[0]

    def kind_counts(self) -> dict[str, int]:
        by_code = {k.code: k.name for k in all_kinds()}
        out: dict[str, int] = {}
        for c in self.codes:
            name = by_code[int(c)]
            out[name] = out.get(name, 0) + 1
        return out


DEFAULT_SCALES = {"gaussian": 0.1}


def partition_layer(width: int, kinds, scalings=None, *,
                    oscillatory_sine: bool = False) -> PartitionAssignment:
    """Assign each of ``width`` neurons one basic activation, round-robin
    over ``kinds``, so per-kind counts differ by at most one.

    ``scalings`` maps kind name -> fixed scale; unlisted kinds get 1.0
    except the Gaussian which defaults to 0.1.  With ``oscillatory_sine``
    the j-th sine neuron gets scale 2*pi*(j+1) instead (the fixed-frequency
    layer used for oscillatory targets).
    """
    kinds = [get_kind(k) for k in kinds]
    if width < len(kinds):
        raise ParameterError(
            f"width {width} is smaller than the activation set size {len(kinds)}")
    scalings = dict(scalings or {})
    codes = np.empty(width, dtype=np.int64)
    scales = np.empty(width, dtype=float)
    sine_count = 0
    for i in range(width):
        k = kinds[i % len(kinds)]
        codes[i] = k.code
        s = scalings.get(k.name, DEFAULT_SCALES.get(k.name, 1.0))
        if oscillatory_sine and k is SINE:
            sine_count += 1
            s = 2.0 * math.pi * sine_count
        scales[i] = s
    return PartitionAssignment(codes, scales)


def kind_by_code(code: int) -> Kind:
    for k in all_kinds():
        if k.code == int(code):
            return k
    raise ParameterError(f"unknown activation code {code}")
