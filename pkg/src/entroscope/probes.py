"""Probe families: Gaussian, wrapped Gaussian, product, pushforward, mollifier, restricted."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special, stats

from . import numerics
from .numerics import IntegrationError, NodeSet, QuadratureRule
from .spaces import ModelSpace, circle, euclidean, product

__all__ = [
    "ProbeConstructionError",
    "ProbeFamily",
    "GaussianProbe",
    "CircleProbe",
    "ProductProbe",
    "PushforwardProbe",
    "MollifierProbe",
    "RestrictedProbe",
    "make_gaussian_probe",
    "make_circle_probe",
    "make_product_probe",
    "make_pushforward_probe",
    "make_mollifier_probe",
    "make_restricted_probe",
    "ProbeDiagnostics",
    "probe_diagnostics",
    "newton_inverse",
]


class ProbeConstructionError(ValueError):
    """A probe family could not be built from the given ingredients."""


def _as_point(x, dim: int) -> np.ndarray:
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape[0] != dim:
        raise ValueError(f"expected a point of dimension {dim}, got {a.shape[0]}")
    return a


class ProbeFamily:
    """A family ``(x, eps) -> mu_{x,eps}`` of probability measures on a model space.

    Subclasses provide ``density``, ``sample``, ``nodes`` and ``support_box``;
    instances are immutable after construction.
    """

    kind = "abstract"
    space: ModelSpace

    def density(self, x, eps: float, y) -> np.ndarray:
        raise NotImplementedError

    def sample(self, x, eps: float, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def native_rule(self) -> QuadratureRule:
        raise NotImplementedError

    def nodes(self, x, eps: float, rule: QuadratureRule) -> NodeSet:
        raise NotImplementedError

    def support_box(self, x, eps: float) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def support_radius(self, eps: float) -> Optional[float]:
        """Radius of the declared neighborhood, ``None`` for the whole space."""
        return None

    def in_support(self, x, eps: float, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return np.ones(y.shape[0], dtype=bool)

    @property
    def dim(self) -> int:
        return self.space.dim

    def describe(self) -> dict:
        return {"kind": self.kind, "space": self.space.describe()}


# -- Gaussian -------------------------------------------------------------------

class GaussianProbe(ProbeFamily):
    kind = "gaussian"

    def __init__(self, dim: int, shape=None):
        if dim < 1:
            raise ProbeConstructionError("dimension must be >= 1")
        shape = np.eye(dim) if shape is None else np.array(shape, dtype=float)
        if shape.shape != (dim, dim):
            raise ProbeConstructionError(f"shape matrix must be {dim}x{dim}")
        if not np.allclose(shape, shape.T, rtol=0, atol=1e-12):
            raise ProbeConstructionError("shape matrix must be symmetric")
        try:
            chol = np.linalg.cholesky(shape)
        except np.linalg.LinAlgError:
            raise ProbeConstructionError("shape matrix must be positive definite") from None
        self.space = euclidean(dim)
        self.shape = shape
        self.chol = chol
        self.inv_shape = np.linalg.inv(shape)
        self.log_det = float(2 * np.sum(np.log(np.diag(chol))))
        self.isotropic = bool(np.array_equal(shape, np.eye(dim)))
        for a in (self.shape, self.chol, self.inv_shape):
            a.setflags(write=False)

    def density(self, x, eps, y):
        x = _as_point(x, self.dim)
        u = np.atleast_2d(np.asarray(y, dtype=float)) - x
        q = np.einsum("ni,ij,nj->n", u, self.inv_shape, u)
        n = self.dim
        return np.exp(-q / (2 * eps) - 0.5 * n * math.log(2 * math.pi * eps) - 0.5 * self.log_det)

    def sample(self, x, eps, n, rng):
        x = _as_point(x, self.dim)
        z = rng.standard_normal((n, self.dim))
        return x + math.sqrt(eps) * z @ self.chol.T

    def native_rule(self):
        return QuadratureRule.gauss_hermite({1: 256, 2: 64}.get(self.dim, 16))

    def nodes(self, x, eps, rule):
        x = _as_point(x, self.dim)
        if rule.kind == "gauss-hermite":
            z, w = numerics.gauss_hermite_standard(int(rule.order or 64), self.dim)
            method = f"gauss-hermite(order={rule.order})"
        elif rule.kind == "gauss-polar":
            z, w = numerics.gauss_polar_standard(int(rule.order or 48), self.dim)
            method = f"gauss-polar(order={rule.order})"
        else:
            raise IntegrationError(f"{rule.kind} rule does not apply to gaussian probes")
        pts = x + math.sqrt(eps) * z @ self.chol.T
        return NodeSet(pts, np.array(w), method)

    def support_box(self, x, eps):
        x = _as_point(x, self.dim)
        half = 12.0 * np.sqrt(eps * np.diag(self.shape))
        return x - half, x + half

    def describe(self):
        return {"kind": "gaussian", "dim": self.dim, "shape": self.shape.tolist()}


def make_gaussian_probe(dim: int, shape=None) -> GaussianProbe:
    """Gaussian probes ``N(x, eps * shape)``; the identity shape is the isotropic heat kernel."""
    return GaussianProbe(dim, shape)


# -- wrapped Gaussian on the circle ----------------------------------------------

def _wrap(d):
    """Representative of an angle difference in (-pi, pi]."""
    d = np.asarray(d, dtype=float)
    r = np.mod(d + np.pi, 2 * np.pi) - np.pi
    return np.where(r == -np.pi, np.pi, r)


class CircleProbe(ProbeFamily):
    """``exp(-d(theta, phi)^2 / 2 eps) / Z_eps`` with ``d`` the shortest-arc distance.

    Nodes and samples are reported in the lift ``theta + (-pi, pi]``.
    """

    kind = "wrapped-gaussian"
    Z_NODES = 1 << 15

    def __init__(self):
        self.space = circle()
        self._z_cache: dict[float, float] = {}
        self._lock = threading.Lock()

    def normalisation(self, eps: float) -> float:
        """Cached ``Z_eps``, by a fine midpoint rule in the arc distance."""
        eps = float(eps)
        z = self._z_cache.get(eps)
        if z is None:
            with self._lock:
                z = self._z_cache.get(eps)
                if z is None:
                    k = self.Z_NODES
                    d = -np.pi + (np.arange(k) + 0.5) * (2 * np.pi / k)
                    z = float(np.sum(np.exp(-d * d / (2 * eps))) * (2 * np.pi / k))
                    self._z_cache[eps] = z
        return z

    @staticmethod
    def normalisation_at(theta: float, eps: float, nodes: int = 4096) -> float:
        """``Z_eps`` evaluated at base angle ``theta`` on a fixed grid ``phi_j = 2 pi j / nodes``."""
        phi = np.arange(nodes) * (2 * np.pi / nodes)
        d = _wrap(phi - theta)
        return float(np.sum(np.exp(-d * d / (2 * eps))) * (2 * np.pi / nodes))

    def density(self, x, eps, y):
        th = float(_as_point(x, 1)[0])
        d = _wrap(np.atleast_2d(np.asarray(y, dtype=float))[:, 0] - th)
        return np.exp(-d * d / (2 * eps)) / self.normalisation(eps)

    def sample(self, x, eps, n, rng):
        th = float(_as_point(x, 1)[0])
        s = math.sqrt(eps)
        u = rng.random(n)
        d = stats.truncnorm.ppf(u, -np.pi / s, np.pi / s) * s
        return (th + d).reshape(-1, 1)

    NEGLIGIBLE = numerics.NEGLIGIBLE_WEIGHT

    def native_rule(self):
        return QuadratureRule("periodic-trapezoid")

    @staticmethod
    def auto_nodes(eps: float) -> int:
        """Power of two giving a spacing of at most a quarter width, within [256, 4096]."""
        want = 2 * np.pi / (0.25 * math.sqrt(eps))
        return int(min(4096, max(256, 1 << int(math.ceil(math.log2(want))))))

    def nodes(self, x, eps, rule):
        if rule.kind != "periodic-trapezoid":
            raise IntegrationError(f"{rule.kind} rule does not apply to circle probes")
        th = float(_as_point(x, 1)[0])
        k = int(rule.nodes or self.auto_nodes(eps))
        d = -np.pi + (np.arange(k) + 0.5) * (2 * np.pi / k)
        w = np.exp(-d * d / (2 * eps))
        keep = w > self.NEGLIGIBLE * w.max()
        d, w = d[keep], w[keep] / np.sum(w)
        return NodeSet((th + d).reshape(-1, 1), w, f"periodic-trapezoid(nodes={k})")

    def support_box(self, x, eps):
        th = float(_as_point(x, 1)[0])
        return np.array([th - np.pi]), np.array([th + np.pi])

    def describe(self):
        return {"kind": "wrapped-gaussian", "space": {"kind": "circle"}}


def make_circle_probe() -> CircleProbe:
    return CircleProbe()


# -- products ---------------------------------------------------------------------

class ProductProbe(ProbeFamily):
    kind = "product"

    def __init__(self, left: ProbeFamily, right: ProbeFamily):
        self.left = left
        self.right = right
        self.space = product(left.space, right.space)

    def _split(self, x):
        x = _as_point(x, self.dim)
        return x[: self.left.dim], x[self.left.dim:]

    def density(self, x, eps, y):
        a, b = self._split(x)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        k = self.left.dim
        return self.left.density(a, eps, y[:, :k]) * self.right.density(b, eps, y[:, k:])

    def sample(self, x, eps, n, rng):
        a, b = self._split(x)
        return np.concatenate([self.left.sample(a, eps, n, rng), self.right.sample(b, eps, n, rng)], axis=1)

    def native_rule(self):
        return QuadratureRule("native")

    def nodes(self, x, eps, rule):
        if rule.kind != "native":
            raise IntegrationError("product probes integrate with their factors' native rules")
        a, b = self._split(x)
        p = numerics.quadrature_nodes(self.left, a, eps)
        q = numerics.quadrature_nodes(self.right, b, eps)
        na, nb = p.size, q.size
        pts = np.concatenate([np.repeat(p.points, nb, axis=0), np.tile(q.points, (na, 1))], axis=1)
        w = np.outer(p.weights, q.weights).ravel()
        return NodeSet(pts, w, f"tensor[{p.method} x {q.method}]")

    def support_box(self, x, eps):
        a, b = self._split(x)
        la, ha = self.left.support_box(a, eps)
        lb, hb = self.right.support_box(b, eps)
        return np.concatenate([la, lb]), np.concatenate([ha, hb])

    def support_radius(self, eps):
        ra, rb = self.left.support_radius(eps), self.right.support_radius(eps)
        if ra is None or rb is None:
            return None
        return math.hypot(ra, rb)

    def in_support(self, x, eps, y):
        a, b = self._split(x)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        k = self.left.dim
        return self.left.in_support(a, eps, y[:, :k]) & self.right.in_support(b, eps, y[:, k:])

    def describe(self):
        return {"kind": "product", "left": self.left.describe(), "right": self.right.describe()}


def make_product_probe(p: ProbeFamily, q: ProbeFamily) -> ProductProbe:
    return ProductProbe(p, q)


# -- pushforward ------------------------------------------------------------------

def newton_inverse(fn: Callable, w, guess=None, iterations: int = 60, tol: float = 1e-13) -> np.ndarray:
    """Solve ``fn(y) = w`` row-wise by Newton's method with finite-difference Jacobians."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    y = w.copy() if guess is None else np.array(np.broadcast_to(guess, w.shape), dtype=float)
    for _ in range(iterations):
        r = np.asarray(fn(y), dtype=float).reshape(w.shape) - w
        if np.max(np.abs(r), initial=0.0) <= tol * (1 + np.max(np.abs(w), initial=0.0)):
            break
        jac = numerics.jacobian_fd(fn, y)
        try:
            step = np.linalg.solve(jac, r[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.einsum("nij,nj->ni", np.linalg.pinv(jac), r)
        y = y - step
    return y


class PushforwardProbe(ProbeFamily):
    """``F_# mu_{F^{-1}(z), eps}``, indexed by the image point ``z``.

    Node sets are the images of the base node sets; ``density`` uses the
    change-of-variables formula with a finite-difference Jacobian of the
    inverse unless an exact one is supplied.
    """

    kind = "pushforward"

    def __init__(self, base: ProbeFamily, forward: Callable, inverse: Optional[Callable] = None,
                 inverse_jacobian: Optional[Callable] = None, jacobian_step: float = 1e-5,
                 tolerance: float = 1e-8, label: str = "F"):
        if base.space.kind != "euclidean":
            raise ProbeConstructionError("pushforward densities are defined on euclidean spaces")
        self.base = base
        self.forward = forward
        self.inverse = inverse if inverse is not None else (lambda w: newton_inverse(forward, w))
        self.inverse_jacobian = inverse_jacobian
        self.jacobian_step = jacobian_step
        self.tolerance = tolerance
        self.label = label
        self.space = euclidean(base.dim)

    def _fwd(self, y):
        return np.asarray(self.forward(np.atleast_2d(y)), dtype=float).reshape(-1, self.dim)

    def _inv(self, w):
        return np.asarray(self.inverse(np.atleast_2d(w)), dtype=float).reshape(-1, self.dim)

    def base_point(self, z) -> np.ndarray:
        return self._inv(_as_point(z, self.dim))[0]

    def validate(self, z, eps: float, rule: Optional[QuadratureRule] = None) -> float:
        """Check ``F^{-1}(F(y)) = y`` on the base node set; returns the worst deviation."""
        x = self.base_point(z)
        zz = self._fwd(x)[0]
        if np.max(np.abs(zz - _as_point(z, self.dim))) > self.tolerance * (1 + np.max(np.abs(zz))):
            raise ProbeConstructionError(f"{self.label}: inverse does not map {z} back onto itself")
        ns = numerics.quadrature_nodes(self.base, x, eps, rule)
        pts = ns.points[ns.weights > 1e-300]
        back = self._inv(self._fwd(pts))
        dev = np.max(np.abs(back - pts) / (1 + np.abs(pts)), initial=0.0)
        if not dev <= self.tolerance:
            raise ProbeConstructionError(
                f"{self.label} is not invertible on the sampled region "
                f"(max |F^-1(F(y)) - y| = {dev:.3e})"
            )
        return float(dev)

    def density(self, z, eps, w):
        x = self.base_point(z)
        w = np.atleast_2d(np.asarray(w, dtype=float))
        y = self._inv(w)
        if self.inverse_jacobian is not None:
            jac = np.asarray(self.inverse_jacobian(w), dtype=float).reshape(-1, self.dim, self.dim)
        else:
            jac = numerics.jacobian_fd(self._inv, w, self.jacobian_step)
        return self.base.density(x, eps, y) * np.abs(np.linalg.det(jac))

    def sample(self, z, eps, n, rng):
        return self._fwd(self.base.sample(self.base_point(z), eps, n, rng))

    def native_rule(self):
        return self.base.native_rule()

    def nodes(self, z, eps, rule):
        ns = self.base.nodes(self.base_point(z), eps, rule)
        return NodeSet(self._fwd(ns.points), ns.weights, f"pushforward[{ns.method}]")

    def support_box(self, z, eps):
        lo, hi = self.base.support_box(self.base_point(z), eps)
        axes = [np.linspace(a, b, 33) for a, b in zip(lo, hi)]
        grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        img = self._fwd(grid)
        return img.min(axis=0), img.max(axis=0)

    def describe(self):
        return {"kind": "pushforward", "map": self.label, "base": self.base.describe()}


def make_pushforward_probe(p: ProbeFamily, forward: Callable, inverse: Optional[Callable] = None,
                           inverse_jacobian: Optional[Callable] = None, check=None,
                           label: str = "F") -> PushforwardProbe:
    """Build ``F_# p``; ``check=(z, eps)`` validates invertibility on the base nodes."""
    probe = PushforwardProbe(p, forward, inverse, inverse_jacobian, label=label)
    if check is not None:
        z, eps = check
        probe.validate(z, eps)
    return probe


# -- mollifier --------------------------------------------------------------------

_KERNELS = {
    "cosine-bump": lambda r: np.where(r <= 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, 1.0))), 0.0),
    "polynomial-bump": lambda r: np.where(r <= 1.0, (1.0 - np.minimum(r, 1.0) ** 2) ** 2, 0.0),
}

_SPHERE_AREA = {1: 2.0, 2: 2 * math.pi, 3: 4 * math.pi}


def _kernel_mass(kernel: Callable, dim: int) -> float:
    t, w = np.polynomial.legendre.leggauss(64)
    r = 0.5 * (t + 1.0)
    return float(_SPHERE_AREA[dim] * np.sum(0.5 * w * kernel(r) * r ** (dim - 1)))


class MollifierProbe(ProbeFamily):
    """Radial bump kernel ``eps^-n rho(u / eps)`` transported through one chart."""

    kind = "mollifier"

    def __init__(self, dim: int, kernel: str = "cosine-bump", chart: Optional[Callable] = None,
                 chart_inverse: Optional[Callable] = None):
        if dim not in _SPHERE_AREA:
            raise ProbeConstructionError("mollifier probes are provided for dimensions 1-3")
        if kernel not in _KERNELS:
            raise ProbeConstructionError(f"unknown kernel {kernel!r}")
        if (chart is None) != (chart_inverse is None):
            raise ProbeConstructionError("chart and chart inverse must be given together")
        self.space = euclidean(dim)
        self.kernel_name = kernel
        self.kernel = _KERNELS[kernel]
        self.mass = _kernel_mass(self.kernel, dim)
        self.chart = chart
        self.chart_inverse = chart_inverse

    def _phi(self, y):
        y = np.atleast_2d(y)
        return y if self.chart is None else np.asarray(self.chart(y), dtype=float).reshape(-1, self.dim)

    def _phi_inv(self, u):
        u = np.atleast_2d(u)
        return u if self.chart_inverse is None else np.asarray(self.chart_inverse(u), dtype=float).reshape(-1, self.dim)

    def _offsets(self, x, y):
        x = _as_point(x, self.dim)
        return self._phi(np.atleast_2d(np.asarray(y, dtype=float))) - self._phi(x)

    def density(self, x, eps, y):
        u = self._offsets(x, y)
        r = np.sqrt(np.sum(u * u, axis=1)) / eps
        val = self.kernel(r) / (self.mass * eps**self.dim)
        if self.chart is not None:
            val = val * np.abs(np.linalg.det(numerics.jacobian_fd(self._phi, y)))
        return val

    def in_support(self, x, eps, y):
        u = self._offsets(x, y)
        return np.sqrt(np.sum(u * u, axis=1)) <= eps

    def support_radius(self, eps):
        return float(eps) if self.chart is None else None

    def sample(self, x, eps, n, rng):
        x = _as_point(x, self.dim)
        out = []
        have = 0
        while have < n:
            m = 2 * (n - have) + 16
            g = rng.standard_normal((m, self.dim))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            r = rng.random(m) ** (1.0 / self.dim)
            keep = rng.random(m) < self.kernel(r)
            u = (g * r[:, None])[keep]
            out.append(u)
            have += u.shape[0]
        u = np.concatenate(out)[:n]
        return self._phi_inv(self._phi(x) + eps * u)

    def native_rule(self):
        return QuadratureRule.legendre_ball(32)

    def nodes(self, x, eps, rule):
        if rule.kind != "legendre-ball":
            raise IntegrationError(f"{rule.kind} rule does not apply to mollifier probes")
        x = _as_point(x, self.dim)
        u, w = numerics.legendre_ball_standard(int(rule.order or 32), self.dim)
        r = np.sqrt(np.sum(u * u, axis=1))
        wts = w * self.kernel(r) / self.mass
        pts = self._phi_inv(self._phi(x) + eps * u)
        return NodeSet(pts, wts, f"legendre-ball(order={rule.order})")

    def support_box(self, x, eps):
        x = _as_point(x, self.dim)
        if self.chart is None:
            return x - eps, x + eps
        axes = [np.linspace(-eps, eps, 17)] * self.dim
        grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        img = self._phi_inv(self._phi(x) + grid)
        return img.min(axis=0), img.max(axis=0)

    def describe(self):
        return {"kind": "mollifier", "dim": self.dim, "kernel": self.kernel_name,
                "chart": "identity" if self.chart is None else "custom"}


def make_mollifier_probe(dim: int = 1, kernel: str = "cosine-bump", chart: Optional[Callable] = None,
                         chart_inverse: Optional[Callable] = None) -> MollifierProbe:
    return MollifierProbe(dim, kernel, chart, chart_inverse)


# -- conditioning on a slab -------------------------------------------------------

class RestrictedProbe(ProbeFamily):
    """Ambient probe conditioned on ``|y_c| <= delta`` and renormalized."""

    kind = "restricted"
    MIN_MASS = 1e-12

    def __init__(self, base: ProbeFamily, slab_space: ModelSpace):
        if slab_space.kind != "slab":
            raise ProbeConstructionError("restriction needs a slab space")
        if slab_space.ambient.dim != base.dim or base.space.kind != slab_space.ambient.kind:
            raise ProbeConstructionError("slab ambient space does not match the probe's space")
        self.base = base
        self.space = slab_space
        self.index = slab_space.constraint_index
        self.delta = slab_space.half_width
        self.gaussian = isinstance(base, GaussianProbe)

    def _check_point(self, x):
        x = _as_point(x, self.dim)
        if abs(x[self.index]) > 1e-12:
            raise ValueError(f"base point {x.tolist()} is not on the constrained set")
        return x

    def _sigma_c(self, eps):
        return math.sqrt(eps * self.base.shape[self.index, self.index])

    def slab_mass(self, x, eps) -> float:
        """Ambient probability of the slab."""
        x = self._check_point(x)
        if self.gaussian:
            s = self._sigma_c(eps)
            xc = x[self.index]
            return float(special.ndtr((self.delta - xc) / s) - special.ndtr((-self.delta - xc) / s))
        ns = numerics.quadrature_nodes(self.base, x, eps)
        inside = np.abs(ns.points[:, self.index]) <= self.delta
        return float(np.sum(ns.weights[inside]))

    def _mass_or_fail(self, x, eps):
        m = self.slab_mass(x, eps)
        if m < self.MIN_MASS:
            raise ProbeConstructionError(f"empty slab: conditioning mass {m:.3e} at eps={eps}")
        return m

    def density(self, x, eps, y):
        x = self._check_point(x)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        m = self._mass_or_fail(x, eps)
        inside = np.abs(y[:, self.index]) <= self.delta
        return np.where(inside, self.base.density(x, eps, y) / m, 0.0)

    def in_support(self, x, eps, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return (np.abs(y[:, self.index]) <= self.delta) & self.base.in_support(x, eps, y)

    def _conditional(self, eps):
        c = self.index
        S = self.base.shape
        o = [i for i in range(self.dim) if i != c]
        gain = S[o, c] / S[c, c]
        cov = S[np.ix_(o, o)] - np.outer(S[o, c], S[c, o]) / S[c, c]
        return o, gain, cov

    def sample(self, x, eps, n, rng):
        x = self._check_point(x)
        self._mass_or_fail(x, eps)
        if not self.gaussian:
            out, have = [], 0
            while have < n:
                y = self.base.sample(x, eps, 4 * (n - have) + 16, rng)
                y = y[np.abs(y[:, self.index]) <= self.delta]
                out.append(y)
                have += y.shape[0]
            return np.concatenate(out)[:n]
        c = self.index
        s = self._sigma_c(eps)
        a, b = (-self.delta - x[c]) / s, (self.delta - x[c]) / s
        yc = x[c] + s * stats.truncnorm.ppf(rng.random(n), a, b)
        y = np.empty((n, self.dim))
        y[:, c] = yc
        if self.dim > 1:
            o, gain, cov = self._conditional(eps)
            z = rng.standard_normal((n, len(o)))
            chol = np.linalg.cholesky(cov)
            y[:, o] = x[o] + np.outer(yc - x[c], gain) + math.sqrt(eps) * z @ chol.T
        return y

    def native_rule(self):
        return QuadratureRule("native")

    def nodes(self, x, eps, rule):
        x = self._check_point(x)
        self._mass_or_fail(x, eps)
        if not self.gaussian:
            ns = numerics.quadrature_nodes(self.base, x, eps)
            inside = np.abs(ns.points[:, self.index]) <= self.delta
            w = np.where(inside, ns.weights, 0.0)
            return NodeSet(ns.points[inside], w[inside] / np.sum(w), f"conditioned[{ns.method}]")
        if rule.kind not in ("native", "gauss-hermite"):
            raise IntegrationError(f"{rule.kind} rule does not apply to restricted probes")
        order = int(rule.order or 64)
        c = self.index
        s = self._sigma_c(eps)
        half = min(self.delta, 12.0 * s)
        t, wt = np.polynomial.legendre.leggauss(order)
        yc = x[c] + half * t
        wc = wt * np.exp(-0.5 * ((yc - x[c]) / s) ** 2)
        wc = wc / np.sum(wc)
        if self.dim == 1:
            return NodeSet(yc.reshape(-1, 1), wc, f"legendre(order={order})")
        o, gain, cov = self._conditional(eps)
        z, wz = numerics.gauss_hermite_standard(min(order, 48), len(o))
        chol = np.linalg.cholesky(cov)
        rest = math.sqrt(eps) * z @ chol.T
        nc, nz = yc.shape[0], z.shape[0]
        pts = np.empty((nc * nz, self.dim))
        pts[:, c] = np.repeat(yc, nz)
        pts[:, o] = x[o] + np.repeat(np.outer(yc - x[c], gain), nz, axis=0) + np.tile(rest, (nc, 1))
        w = np.outer(wc, wz).ravel()
        return NodeSet(pts, w, f"legendre(order={order}) x gauss-hermite")

    def support_box(self, x, eps):
        lo, hi = self.base.support_box(x, eps)
        lo, hi = lo.copy(), hi.copy()
        lo[self.index] = max(lo[self.index], -self.delta)
        hi[self.index] = min(hi[self.index], self.delta)
        return lo, hi

    def describe(self):
        return {"kind": "restricted", "base": self.base.describe(), "space": self.space.describe()}


def make_restricted_probe(p: ProbeFamily, slab_space: ModelSpace) -> RestrictedProbe:
    return RestrictedProbe(p, slab_space)


# -- diagnostics ------------------------------------------------------------------

@dataclass
class ProbeDiagnostics:
    mass: float
    mass_error: float
    mean: np.ndarray
    mean_error: np.ndarray
    covariance: np.ndarray
    covariance_error: np.ndarray
    method: str

    def to_dict(self) -> dict:
        return {
            "mass": self.mass,
            "mass_error": self.mass_error,
            "mean": self.mean.tolist(),
            "mean_error": self.mean_error.tolist(),
            "covariance": self.covariance.tolist(),
            "covariance_error": self.covariance_error.tolist(),
            "method": self.method,
        }


def probe_diagnostics(p: ProbeFamily, x, eps: float, rule: Optional[QuadratureRule] = None) -> ProbeDiagnostics:
    """Quadrature estimates of total mass, first moment and second central moment."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    d = p.dim
    mass = numerics.integrate(p, x, eps, lambda y: np.ones(y.shape[0]), rule)
    means, merr = np.zeros(d), np.zeros(d)
    for i in range(d):
        e = numerics.integrate(p, x, eps, lambda y, i=i: y[:, i], rule)
        means[i], merr[i] = e.value, e.error
    cov, cerr = np.zeros((d, d)), np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            e = numerics.integrate(
                p, x, eps, lambda y, i=i, j=j: (y[:, i] - means[i]) * (y[:, j] - means[j]), rule)
            cov[i, j] = cov[j, i] = e.value
            cerr[i, j] = cerr[j, i] = e.error
    return ProbeDiagnostics(mass.value, mass.error, means, merr, cov, cerr, mass.method)
