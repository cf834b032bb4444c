"""Integration engines, limit extrapolation and small-matrix analysis."""

from __future__ import annotations

import contextlib
import contextvars
import functools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate as sp_integrate
from scipy import special

__all__ = [
    "QuadratureRule",
    "Estimate",
    "NodeSet",
    "ExtrapolationReport",
    "IntegrationError",
    "workers",
    "current_workers",
    "chunk_rng",
    "gauss_hermite_standard",
    "gauss_polar_standard",
    "legendre_ball_standard",
    "quadrature_nodes",
    "weighted_sum",
    "integrate",
    "richardson_limit",
    "min_eigenvalue",
    "numerical_rank",
    "is_positive_definite",
    "pd_threshold",
    "jacobian_fd",
]

MC_CHUNK = 4096
NEGLIGIBLE_WEIGHT = 1e-30

_RULE_KINDS = (
    "native",
    "gauss-hermite",
    "gauss-polar",
    "periodic-trapezoid",
    "legendre-ball",
    "adaptive",
    "monte-carlo",
)


class IntegrationError(RuntimeError):
    """An integration rule cannot be applied to a probe."""


@dataclass(frozen=True)
class QuadratureRule:
    """Named integration rule.

    ``order`` is the per-axis (or radial) node count for the Gaussian and
    ball rules, ``nodes`` the node count of the periodic trapezoid.  A rule
    together with its seed fixes the node set bit-for-bit.
    """

    kind: str = "native"
    order: Optional[int] = None
    nodes: Optional[int] = None
    samples: Optional[int] = None
    seed: Optional[int] = None
    rel_tol: float = 1e-10
    abs_tol: float = 1e-13
    max_depth: int = 200

    def __post_init__(self):
        if self.kind not in _RULE_KINDS:
            raise ValueError(f"unknown quadrature kind {self.kind!r}")
        for name in ("order", "nodes", "samples"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kind == "monte-carlo":
            if self.samples is None:
                raise ValueError("monte-carlo rule needs a sample count")
            if self.seed is None:
                raise ValueError("monte-carlo rule needs a seed")
        if not (self.rel_tol > 0 and self.abs_tol > 0 and self.max_depth >= 1):
            raise ValueError("tolerances must be positive")

    @classmethod
    def gauss_hermite(cls, order: int = 64) -> "QuadratureRule":
        return cls("gauss-hermite", order=order)

    @classmethod
    def gauss_polar(cls, order: int = 48) -> "QuadratureRule":
        return cls("gauss-polar", order=order)

    @classmethod
    def periodic_trapezoid(cls, nodes: int = 4096) -> "QuadratureRule":
        return cls("periodic-trapezoid", nodes=nodes)

    @classmethod
    def legendre_ball(cls, order: int = 48) -> "QuadratureRule":
        return cls("legendre-ball", order=order)

    @classmethod
    def adaptive(cls, rel_tol=1e-10, abs_tol=1e-13, max_depth=200) -> "QuadratureRule":
        return cls("adaptive", rel_tol=rel_tol, abs_tol=abs_tol, max_depth=max_depth)

    @classmethod
    def monte_carlo(cls, samples: int, seed: int) -> "QuadratureRule":
        return cls("monte-carlo", samples=samples, seed=seed)

    @classmethod
    def from_dict(cls, d: dict) -> "QuadratureRule":
        kind = d.get("kind", "native")
        kwargs = {k: d[k] for k in ("order", "nodes", "samples", "seed", "rel_tol", "abs_tol", "max_depth") if k in d}
        return cls(kind, **kwargs)

    def coarser(self) -> Optional["QuadratureRule"]:
        """A cheaper companion rule used for error estimates."""
        if self.order is not None and self.order >= 8:
            o = max(4, (3 * self.order // 4) & ~1)
            return QuadratureRule(self.kind, order=o, nodes=self.nodes)
        if self.nodes is not None and self.nodes >= 16:
            return QuadratureRule(self.kind, order=self.order, nodes=self.nodes // 2)
        return None

    def describe(self) -> dict:
        out = {"kind": self.kind}
        for name in ("order", "nodes", "samples", "seed"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        if self.kind == "adaptive":
            out.update(rel_tol=self.rel_tol, abs_tol=self.abs_tol, max_depth=self.max_depth)
        return out


@dataclass
class Estimate:
    value: float
    error: float
    method: str
    evaluations: int
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "error": self.error,
            "method": self.method,
            "evaluations": self.evaluations,
            "converged": self.converged,
        }


@dataclass(frozen=True, eq=False)
class NodeSet:
    """Points and weights realizing one probe measure under one rule."""

    points: np.ndarray
    weights: np.ndarray
    method: str
    stochastic: bool = False

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])


# -- parallel fan-out ---------------------------------------------------------

_WORKERS = contextvars.ContextVar("entroscope_workers", default=1)


@contextlib.contextmanager
def workers(n: int):
    """Set the worker count for chunked sampling within the block."""
    token = _WORKERS.set(max(1, int(n)))
    try:
        yield
    finally:
        _WORKERS.reset(token)


def current_workers() -> int:
    return _WORKERS.get()


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    """Generator for one Monte Carlo chunk, derived from (seed, chunk index) only."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(chunk),))))


def _monte_carlo_nodes(probe, x, eps, rule: QuadratureRule) -> NodeSet:
    n = int(rule.samples)
    sizes = [min(MC_CHUNK, n - start) for start in range(0, n, MC_CHUNK)]

    def draw(i):
        return probe.sample(x, eps, sizes[i], chunk_rng(rule.seed, i))

    nw = current_workers()
    if nw > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            parts = list(pool.map(draw, range(len(sizes))))
    else:
        parts = [draw(i) for i in range(len(sizes))]
    pts = np.concatenate(parts, axis=0)
    w = np.full(n, 1.0 / n)
    return NodeSet(pts, w, f"monte-carlo(samples={n}, seed={rule.seed})", stochastic=True)


# -- standard rules -----------------------------------------------------------

@functools.lru_cache(maxsize=64)
def gauss_hermite_standard(order: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite nodes/weights for the standard normal in R^dim.

    Nodes whose weight is below ``NEGLIGIBLE_WEIGHT`` times the largest are
    dropped; they sit far in the tails and change no sum at double precision.
    """
    z, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([z] * dim), indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    wg = np.meshgrid(*([w] * dim), indexing="ij")
    wts = np.prod(np.stack([g.reshape(-1) for g in wg], axis=1), axis=1)
    keep = wts >= NEGLIGIBLE_WEIGHT * wts.max()
    pts, wts = np.ascontiguousarray(pts[keep]), np.ascontiguousarray(wts[keep])
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def _sphere_rule(order: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-sphere nodes with weights summing to 1 (antipodally symmetric)."""
    if dim == 1:
        return np.array([[-1.0], [1.0]]), np.array([0.5, 0.5])
    k = 4 * order
    phi = (np.arange(k) + 0.5) * (2 * np.pi / k)
    if dim == 2:
        return np.stack([np.cos(phi), np.sin(phi)], axis=1), np.full(k, 1.0 / k)
    if dim == 3:
        c, wc = np.polynomial.legendre.leggauss(2 * order)
        C, P = np.meshgrid(c, phi, indexing="ij")
        S = np.sqrt(1 - C * C)
        pts = np.stack([(S * np.cos(P)).ravel(), (S * np.sin(P)).ravel(), C.ravel()], axis=1)
        w = np.outer(wc / 2.0, np.full(k, 1.0 / k)).ravel()
        return pts, w
    raise IntegrationError("polar rules are provided for dimensions 1-3")


@functools.lru_cache(maxsize=64)
def gauss_polar_standard(order: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Radial x angular rule for the standard normal in R^dim (dim <= 3).

    Radial nodes integrate against the chi density exactly for even
    polynomials of degree < 4*order; the angular rule is antipodally
    symmetric so odd moments vanish to rounding.
    """
    if dim == 1:
        return gauss_hermite_standard(2 * order, 1)
    s, ws = special.roots_genlaguerre(order, dim / 2.0 - 1.0)
    ws = ws / ws.sum()
    r = np.sqrt(2.0 * s)
    omega, wo = _sphere_rule(order, dim)
    pts = (r[:, None, None] * omega[None, :, :]).reshape(-1, dim)
    wts = np.outer(ws, wo).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


@functools.lru_cache(maxsize=64)
def legendre_ball_standard(order: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes on the closed unit ball with weights = volume element (unnormalized).

    Gauss-Legendre in the radius times the angular rule; summing
    ``k(|u|) * w`` integrates a radial kernel over the ball.
    """
    if dim == 1:
        u, w = np.polynomial.legendre.leggauss(2 * order)
        return u.reshape(-1, 1), w
    t, wt = np.polynomial.legendre.leggauss(order)
    r = 0.5 * (t + 1.0)
    wr = 0.5 * wt * r ** (dim - 1)
    omega, wo = _sphere_rule(order, dim)
    area = 2 * np.pi if dim == 2 else 4 * np.pi
    pts = (r[:, None, None] * omega[None, :, :]).reshape(-1, dim)
    wts = np.outer(wr, wo * area).ravel()
    return pts, wts


@functools.lru_cache(maxsize=48)
def _cached_nodes(probe, x: tuple, eps: float, rule: QuadratureRule) -> NodeSet:
    xa = np.asarray(x, dtype=float)
    if rule.kind == "monte-carlo":
        ns = _monte_carlo_nodes(probe, xa, eps, rule)
    else:
        ns = probe.nodes(xa, eps, rule)
    ns.points.setflags(write=False)
    ns.weights.setflags(write=False)
    return ns


def quadrature_nodes(probe, x, eps: float, rule: Optional[QuadratureRule] = None) -> NodeSet:
    """Node set realizing ``probe`` at ``(x, eps)``; cached, read-only."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    rule = rule or QuadratureRule()
    if rule.kind == "native":
        rule = probe.native_rule()
    if rule.kind == "adaptive":
        raise IntegrationError("adaptive rules have no fixed node set")
    key = tuple(float(v) for v in np.atleast_1d(np.asarray(x, dtype=float)))
    return _cached_nodes(probe, key, float(eps), rule)


def weighted_sum(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Fixed-order (pairwise) weighted reduction along the node axis."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        return np.sum(weights * v)
    return np.sum(np.ascontiguousarray((weights[:, None] * v).T), axis=1)


def _integrate_nodes(ns: NodeSet, integrand) -> tuple[float, float]:
    vals = np.asarray(integrand(ns.points), dtype=float)
    value = float(weighted_sum(ns.weights, vals))
    if ns.stochastic:
        n = vals.shape[0]
        err = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    else:
        err = 0.0
    return value, err


def _integrate_adaptive(probe, x, eps, integrand, rule: QuadratureRule) -> Estimate:
    lo, hi = probe.support_box(np.asarray(x, dtype=float), eps)
    dim = len(lo)
    if dim > 3:
        raise IntegrationError("adaptive integration is limited to dimension <= 3")
    count = [0]

    def fn(*coords):
        y = np.array(coords, dtype=float).reshape(1, -1)
        count[0] += 1
        return float(integrand(y)[0] * probe.density(x, eps, y)[0])

    opts = {"epsabs": rule.abs_tol, "epsrel": rule.rel_tol, "limit": rule.max_depth}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", sp_integrate.IntegrationWarning)
        value, err = sp_integrate.nquad(fn, list(zip(lo, hi)), opts=[opts] * dim)
    converged = not any(issubclass(c.category, sp_integrate.IntegrationWarning) for c in caught)
    converged = converged and err <= max(rule.abs_tol, rule.rel_tol * abs(value)) * 10
    return Estimate(float(value), float(err), "adaptive", count[0], converged)


def integrate(probe, x, eps: float, integrand: Callable[[np.ndarray], np.ndarray],
              rule: Optional[QuadratureRule] = None) -> Estimate:
    """Estimate the integral of ``integrand`` against the probe measure at ``(x, eps)``.

    Deterministic rules report the gap to a coarser companion rule as the
    error; Monte Carlo reports the standard error of the mean.  A failed
    adaptive run comes back with ``converged=False``.
    """
    rule = rule or QuadratureRule()
    if rule.kind == "native":
        rule = probe.native_rule()
    if rule.kind == "adaptive":
        return _integrate_adaptive(probe, x, eps, integrand, rule)
    ns = quadrature_nodes(probe, x, eps, rule)
    value, err = _integrate_nodes(ns, integrand)
    evals = ns.size
    if not ns.stochastic:
        coarse = rule.coarser()
        if coarse is not None:
            try:
                cns = quadrature_nodes(probe, x, eps, coarse)
                cval, _ = _integrate_nodes(cns, integrand)
                err = abs(value - cval)
                evals += cns.size
            except IntegrationError:
                pass
    ok = math.isfinite(value)
    return Estimate(value, err, ns.method, evals, ok)


# -- extrapolation ------------------------------------------------------------

@dataclass
class ExtrapolationReport:
    samples: list
    limit: float
    observed_order: Optional[float]
    converged: bool
    residual: float
    expected_order: float = 1.0
    diagnostic: str = ""
    table: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "samples": [[h, v] for h, v in self.samples],
            "limit": self.limit,
            "observed_order": self.observed_order,
            "expected_order": self.expected_order,
            "converged": self.converged,
            "residual": self.residual,
            "diagnostic": self.diagnostic,
        }


def richardson_limit(samples: Sequence[tuple[float, float]], expected_order: float = 1.0,
                     tol: float = 1e-6) -> ExtrapolationReport:
    """Iterated Richardson elimination of the errors ``h^p, h^2p, ...``.

    Neville's recursion: polynomial extrapolation to 0 in the variable
    ``h^p``, valid for any strictly decreasing steps.  ``samples`` are ``(h, value)`` pairs with strictly decreasing ``h``.
    Converged means the last two diagonal extrapolants differ by less than
    ``tol * max(1, |limit|)``.
    """
    pts = [(float(h), float(v)) for h, v in samples]
    if len(pts) < 3:
        raise ValueError("richardson_limit needs at least 3 samples")
    hs = np.array([h for h, _ in pts])
    if np.any(hs <= 0) or np.any(np.diff(hs) >= 0):
        raise ValueError("steps must be positive and strictly decreasing")
    vals = [v for _, v in pts]
    p = float(expected_order)
    if not all(math.isfinite(v) for v in vals):
        return ExtrapolationReport(pts, float("nan"), None, False, float("inf"), p,
                                   "non-finite sample values")
    n = len(vals)
    table = [[v] for v in vals]
    for i in range(1, n):
        for j in range(1, i + 1):
            ratio = (hs[i - j] / hs[i]) ** p
            prev = table[i][j - 1]
            table[i].append(prev + (prev - table[i - 1][j - 1]) / (ratio - 1.0))
    limit = table[-1][-1]
    residual = abs(limit - table[-2][-1])
    d1, d2 = vals[-2] - vals[-3], vals[-1] - vals[-2]
    if d1 != 0 and d2 != 0 and abs(d2) < abs(d1):
        observed = math.log(abs(d1 / d2)) / math.log(hs[-2] / hs[-1])
    else:
        observed = None
    converged = residual <= tol * max(1.0, abs(limit))
    diag = ""
    if not converged:
        diffs = np.diff(vals)
        if np.any(np.sign(diffs[1:]) != np.sign(diffs[:-1])) and abs(d2) >= abs(d1):
            diag = "oscillating, non-contracting tail"
        else:
            diag = f"last extrapolants differ by {residual:.3e}"
    return ExtrapolationReport(pts, float(limit), observed, converged, float(residual), p, diag,
                               [list(map(float, row)) for row in table])


# -- matrix analysis ----------------------------------------------------------

def min_eigenvalue(m) -> float:
    """Smallest eigenvalue of the symmetrized matrix."""
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.size == 0:
        return float("inf")
    a = 0.5 * (a + a.T)
    return float(np.linalg.eigvalsh(a)[0])


def numerical_rank(m, tol: float = 1e-8) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def pd_threshold(m, margin: float = 1e-8) -> float:
    """Margin scaled by ``max(1, trace/n)``; rounding-level eigenvalues stay below it."""
    a = np.atleast_2d(np.asarray(m, dtype=float))
    n = a.shape[0]
    scale = max(1.0, abs(float(np.trace(a))) / n) if n else 1.0
    return margin * scale


def is_positive_definite(m, margin: float = 1e-8) -> bool:
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.size == 0:
        return True
    return min_eigenvalue(a) > pd_threshold(a, margin)


def jacobian_fd(fn: Callable[[np.ndarray], np.ndarray], points, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobians of a vectorized map at each point: shape (N, m, d)."""
    y = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = y.shape
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        fp = np.asarray(fn(y + e), dtype=float).reshape(n, -1)
        fm = np.asarray(fn(y - e), dtype=float).reshape(n, -1)
        cols.append((fp - fm) / (2 * step))
    return np.stack(cols, axis=2)
