"""Model spaces and bounded test functions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ModelSpace",
    "euclidean",
    "circle",
    "product",
    "slab",
    "TestFunction",
    "SmoothComposer",
    "COMPOSERS",
    "compose",
    "coordinate",
    "constant",
    "directional_coordinates",
]


@dataclass(frozen=True)
class ModelSpace:
    """A concrete model space: R^n, the circle, a product, or a slab.

    Points are stored as float arrays of length ``dim``.  Circle points are
    angles; a probe based at ``theta0`` reports its nodes in the lift
    ``(theta0 - pi, theta0 + pi]`` so local angular coordinates are continuous
    near the base point.
    """

    kind: str
    dim: int
    left: Optional["ModelSpace"] = None
    right: Optional["ModelSpace"] = None
    ambient: Optional["ModelSpace"] = None
    constraint_index: Optional[int] = None
    half_width: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "circle", "product", "slab"):
            raise ValueError(f"unknown space kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.kind == "slab":
            if self.half_width is None or not self.half_width > 0:
                raise ValueError("slab half-width must be positive")
            if not 0 <= self.constraint_index < self.ambient.dim:
                raise ValueError("constraint index out of range")

    def variables(self) -> list[str]:
        """Variable names accepted by the expression parser on this space."""
        if self.kind == "circle":
            return ["theta"]
        names = [f"y{i + 1}" for i in range(self.dim)]
        if len(self.circle_axes()) == 1:
            names.append("theta")
        return names

    def circle_axes(self) -> list[int]:
        """Coordinate indices that are angles."""
        if self.kind == "circle":
            return [0]
        if self.kind == "product":
            off = self.left.dim
            return self.left.circle_axes() + [off + i for i in self.right.circle_axes()]
        if self.kind == "slab":
            return self.ambient.circle_axes()
        return []

    def variable_index(self, name: str) -> int:
        if name == "theta":
            axes = self.circle_axes()
            if len(axes) != 1:
                raise KeyError(name)
            return axes[0]
        if name.startswith("y") and name[1:].isdigit():
            i = int(name[1:]) - 1
            if 0 <= i < self.dim and self.kind != "circle":
                return i
        raise KeyError(name)

    def describe(self) -> dict:
        if self.kind == "euclidean":
            return {"kind": "euclidean", "dim": self.dim}
        if self.kind == "circle":
            return {"kind": "circle"}
        if self.kind == "product":
            return {"kind": "product", "left": self.left.describe(), "right": self.right.describe()}
        return {
            "kind": "slab",
            "ambient": self.ambient.describe(),
            "constraint_index": self.constraint_index,
            "half_width": self.half_width,
        }


def euclidean(n: int) -> ModelSpace:
    return ModelSpace("euclidean", int(n))


def circle() -> ModelSpace:
    return ModelSpace("circle", 1)


def product(left: ModelSpace, right: ModelSpace) -> ModelSpace:
    return ModelSpace("product", left.dim + right.dim, left=left, right=right)


def slab(ambient: ModelSpace, constraint_index: int, half_width: float) -> ModelSpace:
    return ModelSpace(
        "slab",
        ambient.dim,
        ambient=ambient,
        constraint_index=int(constraint_index),
        half_width=float(half_width),
    )


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Bounded function on a model space with a tracked sup-norm bound.

    ``evaluator`` maps an ``(N, dim)`` array of points to an ``(N,)`` array.
    ``bound_estimated`` is set when ``bound`` came from sampling rather than
    from the caller or from exact bookkeeping.
    """

    __test__ = False  # not a pytest class

    evaluator: Callable[[np.ndarray], np.ndarray]
    domain: ModelSpace
    bound: float
    label: str = "f"
    center: Optional[tuple] = None
    bound_estimated: bool = False

    def __post_init__(self):
        if not (self.bound > 0 and math.isfinite(self.bound)):
            raise ValueError(f"sup-bound of {self.label} must be positive and finite, got {self.bound}")

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.ndim < 2:
            pts = pts.reshape(-1, self.domain.dim)
        out = np.asarray(self.evaluator(pts), dtype=float)
        return np.broadcast_to(out, (pts.shape[0],)).copy() if out.ndim == 0 else out

    def at(self, point) -> float:
        return float(self(np.asarray(point, dtype=float).reshape(1, -1))[0])

    def _wrap(self, other) -> "TestFunction":
        if isinstance(other, TestFunction):
            return other
        c = float(other)
        return constant(self.domain, c)

    def __add__(self, other):
        other = self._wrap(other)
        a, b = self.evaluator, other.evaluator
        return TestFunction(lambda y: a(y) + b(y), self.domain, self.bound + other.bound,
                            f"({self.label} + {other.label})",
                            bound_estimated=self.bound_estimated or other.bound_estimated)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * self._wrap(other)

    def __rsub__(self, other):
        return self._wrap(other) + (-1.0) * self

    def __mul__(self, other):
        if not isinstance(other, TestFunction):
            c = float(other)
            a = self.evaluator
            return TestFunction(lambda y: c * a(y), self.domain, max(abs(c), 1e-300) * self.bound,
                                f"{c:g}*{self.label}", center=self.center,
                                bound_estimated=self.bound_estimated)
        a, b = self.evaluator, other.evaluator
        return TestFunction(lambda y: a(y) * b(y), self.domain, self.bound * other.bound,
                            f"({self.label} * {other.label})",
                            bound_estimated=self.bound_estimated or other.bound_estimated)

    __rmul__ = __mul__

    def __neg__(self):
        return -1.0 * self

    def centered(self, point) -> "TestFunction":
        """``f - f(point)``; the bound grows by ``|f(point)|``."""
        value = self.at(point)
        a = self.evaluator
        return TestFunction(lambda y: a(y) - value, self.domain, self.bound + abs(value),
                            f"({self.label} - {value:.6g})", center=tuple(np.atleast_1d(point)),
                            bound_estimated=self.bound_estimated)

    def relabel(self, label: str) -> "TestFunction":
        return TestFunction(self.evaluator, self.domain, self.bound, label, self.center,
                            self.bound_estimated)

    def spot_check(self, points) -> float:
        """Largest observed ``|f| / bound`` on the given points."""
        vals = np.abs(self(points))
        return float(np.max(vals) / self.bound) if vals.size else 0.0


def constant(space: ModelSpace, value: float) -> TestFunction:
    v = float(value)
    return TestFunction(lambda y: np.full(y.shape[0], v), space, max(abs(v), 1e-300), f"{v:g}")


def coordinate(space: ModelSpace, index: int, bound: float, shift: float = 0.0) -> TestFunction:
    """``y[index] - shift``, clipped to ``[-bound, bound]`` so the bound is exact.

    Pick ``bound`` several probe widths out; the clipping then moves
    Gaussian moments by far less than rounding.
    """
    b = float(bound)
    return TestFunction(lambda y: np.clip(y[:, index] - shift, -b, b), space, b,
                        f"y{index + 1}" if shift == 0 else f"(y{index + 1} - {shift:g})")


def directional_coordinates(space: ModelSpace, center) -> list[TestFunction]:
    """Normalized directional coordinates ``(y_i - c_i) / |y - c|``.

    Bounded by 1.  At the center itself the value is 0 (the ray-limit
    convention); no quadrature rule used here places a node there.
    """
    c = np.asarray(center, dtype=float).reshape(-1)
    out = []
    for i in range(space.dim):
        def f(y, i=i):
            u = y - c
            r = np.sqrt(np.sum(u * u, axis=1))
            safe = np.where(r > 0, r, 1.0)
            return np.where(r > 0, u[:, i] / safe, 0.0)
        out.append(TestFunction(f, space, 1.0, f"dir{i + 1}", center=tuple(c)))
    return out


def _bump(u: np.ndarray) -> np.ndarray:
    r2 = np.sum(u * u, axis=1) if u.ndim == 2 else u * u
    inside = r2 < 1.0
    out = np.zeros_like(r2, dtype=float)
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


@dataclass(frozen=True)
class SmoothComposer:
    """Entry of the smooth-composition catalog.

    ``apply`` takes a list of value arrays; ``bound`` takes the list of input
    bounds and the composer parameters.
    """

    name: str
    arity: Optional[int]
    apply: Callable
    bound: Callable
    params: dict = field(default_factory=dict)


def _poly_apply(vals, coeffs=(0.0, 1.0)):
    return np.polynomial.polynomial.polyval(vals[0], coeffs)


def _poly_bound(bounds, coeffs=(0.0, 1.0)):
    b = bounds[0]
    return sum(abs(a) * b**k for k, a in enumerate(coeffs))


COMPOSERS: dict[str, SmoothComposer] = {
    "polynomial": SmoothComposer("polynomial", 1, _poly_apply, _poly_bound),
    "exp": SmoothComposer("exp", 1, lambda v: np.exp(v[0]), lambda b: math.exp(b[0])),
    "sin": SmoothComposer("sin", 1, lambda v: np.sin(v[0]), lambda b: min(1.0, b[0])),
    "cos": SmoothComposer("cos", 1, lambda v: np.cos(v[0]), lambda b: 1.0),
    "atan": SmoothComposer("atan", 1, lambda v: np.arctan(v[0]), lambda b: min(math.pi / 2, b[0])),
    "bump": SmoothComposer("bump", None, lambda v: _bump(np.stack(v, axis=1)),
                           lambda b: math.exp(-1.0)),
}


def compose(name: str, funcs: Sequence[TestFunction], **params) -> TestFunction:
    """Compose ``h(f_1, ..., f_k)`` for ``h`` from the catalog."""
    try:
        comp = COMPOSERS[name]
    except KeyError:
        raise ValueError(f"unknown composer {name!r}") from None
    if not funcs:
        raise ValueError("compose needs at least one function")
    if comp.arity is not None and len(funcs) != comp.arity:
        raise ValueError(f"{name} takes {comp.arity} argument(s), got {len(funcs)}")
    space = funcs[0].domain
    evals = [f.evaluator for f in funcs]
    bound = comp.bound([f.bound for f in funcs], **params)

    def h(y):
        return comp.apply([e(y) for e in evals], **params)

    label = f"{name}({', '.join(f.label for f in funcs)})"
    return TestFunction(h, space, max(bound, 1e-300), label,
                        bound_estimated=any(f.bound_estimated for f in funcs))
