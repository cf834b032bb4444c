"""Geometric verifiers built on the entropy coefficients.

Every verifier returns a plain report object with a ``to_dict`` method and a
boolean-ish verdict; failures of the property under test are verdicts, not
exceptions.  Exceptions are reserved for malformed input (bad charts, empty
slabs, non-invertible maps).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import numerics
from .entropy import (
    CoefficientEstimate,
    EpsLevel,
    LevelIntegrals,
    Schedules,
    _assemble,
    entropy_response,
    joint_response,
    quadratic_response,
    small_scale_coefficient,
)
from .numerics import QuadratureRule
from .probes import (
    GaussianProbe,
    ProbeFamily,
    ProductProbe,
    make_pushforward_probe,
    make_restricted_probe,
)
from .spaces import TestFunction, slab

__all__ = [
    "PD_MARGIN",
    "RIGIDITY_THRESHOLD",
    "ChartError",
    "InformationGram",
    "gram_matrix",
    "ChartReport",
    "chart_check",
    "ProductReport",
    "product_check",
    "PushforwardReport",
    "pushforward_check",
    "SubmanifoldReport",
    "submanifold_check",
    "MapRankReport",
    "rank_classify",
    "StabilityTrace",
    "stability_sweep",
    "RigidityReport",
    "rigidity_compare",
    "lift",
    "pullback",
]

log = logging.getLogger(__name__)

PD_MARGIN = 1e-8
RIGIDITY_THRESHOLD = 1e-4
IDENTITY_TOL = 1e-8


class ChartError(ValueError):
    """A chart is not a valid coordinate system at the requested point."""


def _point(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def _matrix_list(m: np.ndarray) -> list:
    return [[float(v) for v in row] for row in np.atleast_2d(m)]


# -- Gram matrices ----------------------------------------------------------------

@dataclass
class InformationGram:
    """``(I_x(f_i, f_j))`` plus eigenvalue and positive-definiteness report.

    ``eps`` is ``None`` for small-scale limits and the probe scale for an
    eps-level Gram.  ``pd`` is ``None`` when some entry failed to converge.
    ``levels`` holds the eps-level matrices behind a limit Gram.
    """

    point: list
    labels: list
    matrix: np.ndarray
    analytic_matrix: np.ndarray
    min_eigenvalue: float
    pd: Optional[bool]
    reliable: bool
    eps: Optional[float] = None
    margin: float = PD_MARGIN
    threshold: float = PD_MARGIN
    entries: dict = field(default_factory=dict)
    levels: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.labels)

    def pd_at(self, margin: float) -> bool:
        return numerics.is_positive_definite(self.matrix, margin)

    def to_dict(self, detail: bool = False) -> dict:
        out = {
            "point": self.point,
            "labels": list(self.labels),
            "level": "limit" if self.eps is None else {"eps": self.eps},
            "matrix": _matrix_list(self.matrix),
            "analytic_matrix": _matrix_list(self.analytic_matrix),
            "min_eigenvalue": self.min_eigenvalue,
            "pd_margin": self.margin,
            "pd_threshold": self.threshold,
            "pd": self.pd,
            "reliable": self.reliable,
            "notes": list(self.notes),
        }
        if detail:
            out["entries"] = {f"{i},{j}": e.to_dict() for (i, j), e in sorted(self.entries.items())}
        return out


def _finish_gram(x, funcs, matrix, analytic, reliable, eps, margin, entries, levels, notes):
    reliable = bool(reliable)
    if matrix.size == 0:
        lam = float("inf")
        pd: Optional[bool] = True
        thr = margin
    else:
        if not np.all(np.isfinite(matrix)):
            reliable = False
            lam = float("nan")
            thr = margin
        else:
            lam = numerics.min_eigenvalue(matrix)
            thr = numerics.pd_threshold(matrix, margin)
        pd = bool(lam > thr) if reliable else None
    if not reliable:
        notes = list(notes) + ["some entries did not converge; PD verdict withheld"]
    return InformationGram(_point(x).tolist(), [f.label for f in funcs], matrix, analytic, lam, pd,
                           reliable, eps, margin, thr, entries, levels, notes)


def gram_matrix(p: ProbeFamily, x, funcs: Sequence[TestFunction], schedules: Schedules = Schedules(),
                rule: Optional[QuadratureRule] = None, eps: Optional[float] = None,
                margin: float = PD_MARGIN) -> InformationGram:
    """Information Gram of ``funcs`` at ``x``.

    With ``eps=None`` each entry is the small-scale limit; otherwise the
    matrix holds eps-level joint responses.  Only the upper triangle is
    computed; the node set and function values are shared across entries.
    """
    funcs = list(funcs)
    k = len(funcs)
    pairs = [(i, j) for i in range(k) for j in range(i, k)]
    eps_list = [float(eps)] if eps is not None else schedules.eps_values()
    per_pair: dict = {ij: [] for ij in pairs}
    for e in eps_list:
        level = LevelIntegrals(p, x, e, rule)
        for i, j in pairs:
            if i == j:
                r = quadratic_response(p, x, e, funcs[i], schedules, rule, level=level)
            else:
                r = joint_response(p, x, e, funcs[i], funcs[j], schedules, rule, level=level)
            per_pair[(i, j)].append((e, r))

    matrix = np.full((k, k), np.nan)
    analytic = np.full((k, k), np.nan)
    entries: dict = {}
    reliable = True
    level_mats = [(e, np.zeros((k, k))) for e in eps_list]
    for (i, j), rs in per_pair.items():
        for (e, r), (_, lm) in zip(rs, level_mats):
            lm[i, j] = lm[j, i] = r.value
        if eps is not None:
            e, r = rs[0]
            entries[(i, j)] = r
            val, ana, ok = r.value, r.analytic, r.converged
        else:
            levels = [EpsLevel(e, r.value, r.analytic, r.report, r.uniformity) for e, r in rs]
            labels = (funcs[i].label,) if i == j else (funcs[i].label, funcs[j].label)
            c = _assemble(levels, labels, schedules)
            entries[(i, j)] = c
            ok = c.converged and c.limit is not None
            val = c.limit if c.limit is not None else float("nan")
            ana = c.analytic_value if c.analytic_value is not None else float("nan")
        reliable = reliable and ok
        matrix[i, j] = matrix[j, i] = val
        analytic[i, j] = analytic[j, i] = ana
    levels_out = [] if eps is not None else level_mats
    return _finish_gram(x, funcs, matrix, analytic, reliable, eps, margin, entries, levels_out, [])


# -- entropy coordinate charts ----------------------------------------------------------

@dataclass
class ChartReport:
    labels: list
    point: list
    centered: bool
    center_values: list
    injectivity: dict
    grams: list
    verdict: str
    eps: Optional[float] = None

    @property
    def is_chart(self) -> bool:
        return self.verdict == "entropy-chart"

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "point": self.point,
            "level": "limit" if self.eps is None else {"eps": self.eps},
            "centered": self.centered,
            "center_values": self.center_values,
            "injectivity": self.injectivity,
            "grams": [g.to_dict() for g in self.grams],
            "verdict": self.verdict,
        }


def _low_discrepancy(lo, hi, n: int) -> np.ndarray:
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    pts = qmc.Halton(d=lo.size, scramble=False).random(n)
    return qmc.scale(pts, lo, hi) if np.all(hi > lo) else lo + pts * (hi - lo)


def chart_check(p: ProbeFamily, x, funcs: Sequence[TestFunction], region, schedules: Schedules = Schedules(),
                rule: Optional[QuadratureRule] = None, samples: int = 256, nearby: int = 8,
                eps: Optional[float] = None, margin: float = PD_MARGIN,
                center_tol: float = 1e-10, separation_tol: float = 1e-10) -> ChartReport:
    """Sample-based evidence that ``funcs`` form a chart centered at ``x``.

    ``region`` is a box ``(lo, hi)`` containing ``x``.  Injectivity is
    tested on all pairs of an unscrambled Halton sample plus ``x``; the Gram
    is checked at ``x`` and at the ``nearby`` sample points closest to it.
    ``eps`` selects eps-level Grams instead of small-scale limits.
    """
    x = _point(x)
    lo, hi = (np.asarray(b, dtype=float).reshape(-1) for b in region)
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("sample region must contain the base point")
    funcs = list(funcs)
    values = [f.at(x) for f in funcs]
    centered = all(abs(v) <= center_tol for v in values)

    pts = np.vstack([x[None, :], _low_discrepancy(lo, hi, samples)])
    img = np.stack([f(pts) for f in funcs], axis=1) if funcs else np.zeros((pts.shape[0], 0))
    worst, worst_pair, tested = float("inf"), None, 0
    for a, b in itertools.combinations(range(pts.shape[0]), 2):
        if np.max(np.abs(pts[a] - pts[b])) <= 1e-14:
            continue
        tested += 1
        d = float(np.linalg.norm(img[a] - img[b]))
        if d < worst:
            worst, worst_pair = d, (pts[a].tolist(), pts[b].tolist())
    injective = worst >= separation_tol
    injectivity = {"pairs_tested": tested, "min_image_separation": worst,
                   "closest_pair": worst_pair, "pass": injective}

    grams = []
    if funcs:
        dist = np.linalg.norm(pts[1:] - x, axis=1)
        chosen = [x] + [pts[1 + i] for i in np.argsort(dist, kind="stable")[:nearby]]
        grams = [gram_matrix(p, y, funcs, schedules, rule, eps, margin) for y in chosen]
    all_pd = all(g.pd for g in grams) and bool(grams)

    if not centered:
        verdict = "not-centered"
    elif not injective:
        verdict = "non-injective"
    elif not all_pd:
        verdict = "degenerate-gram"
    else:
        verdict = "entropy-chart"
    return ChartReport([f.label for f in funcs], x.tolist(), centered, values, injectivity, grams,
                       verdict, eps)


# -- products ---------------------------------------------------------------------------

def lift(f: TestFunction, space, offset: int, width: int) -> TestFunction:
    """``f`` viewed as a function of the coordinates ``offset:offset+width`` of a product."""
    ev = f.evaluator
    return TestFunction(lambda y: ev(y[:, offset:offset + width]), space, f.bound, f.label,
                        bound_estimated=f.bound_estimated)


@dataclass
class ProductReport:
    labels: list
    gram: Optional[InformationGram]
    factor_grams: list
    mixed_max: float
    block_gap: float
    level_mixed_max: float
    level_block_gap: float
    centering: Optional[dict]
    verdict: bool
    reliable: bool
    tolerance: float = IDENTITY_TOL
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "gram": None if self.gram is None else self.gram.to_dict(),
            "factor_grams": [g.to_dict() for g in self.factor_grams],
            "mixed_block_max_abs": self.mixed_max,
            "factor_block_max_gap": self.block_gap,
            "eps_level_mixed_minus_mean_product": self.level_mixed_max,
            "eps_level_factor_block_max_gap": self.level_block_gap,
            "centering": self.centering,
            "tolerance": self.tolerance,
            "block_diagonal": self.verdict,
            "reliable": self.reliable,
            "notes": list(self.notes),
        }


def _block_stats(full, left, right, k):
    mixed = float(np.max(np.abs(full[:k, k:]), initial=0.0))
    gaps = [0.0]
    if k:
        gaps.append(float(np.max(np.abs(full[:k, :k] - left))))
    if full.shape[0] > k:
        gaps.append(float(np.max(np.abs(full[k:, k:] - right))))
    return mixed, max(gaps)


def product_check(p: ProbeFamily, q: ProbeFamily, x, y, fs: Sequence[TestFunction],
                  gs: Sequence[TestFunction], schedules: Schedules = Schedules(),
                  rule: Optional[QuadratureRule] = None, tolerance: float = IDENTITY_TOL) -> ProductReport:
    """Block structure of the Gram on ``p (x) q``.

    Functions are centered at their base points first.  Limits are compared
    against the factor Grams.  Each eps-level matrix is compared against the
    factor Grams on the diagonal blocks and against the outer product of the
    factor means on the mixed block.  One mixed coefficient is also
    computed without centering and reported.
    """
    x, y = _point(x), _point(y)
    fs, gs = list(fs), list(gs)
    if not fs and not gs:
        log.warning("product_check with no functions; verdict is vacuous")
        return ProductReport([], None, [], 0.0, 0.0, 0.0, 0.0, None, True, True, tolerance,
                             ["no functions supplied; verdict is vacuous"])
    pq = ProductProbe(p, q)
    k, dx, dy = len(fs), p.dim, q.dim
    fc = [f.centered(x).relabel(f.label) for f in fs]
    gc = [g.centered(y).relabel(g.label) for g in gs]
    lifted = [lift(f, pq.space, 0, dx) for f in fc] + [lift(g, pq.space, dx, dy) for g in gc]
    xy = np.concatenate([x, y])

    full = gram_matrix(pq, xy, lifted, schedules, rule)
    gl = gram_matrix(p, x, fc, schedules) if fc else None
    gr = gram_matrix(q, y, gc, schedules) if gc else None
    factors = [g for g in (gl, gr) if g is not None]
    empty = np.zeros((0, 0))
    mixed, gap = _block_stats(full.matrix, gl.matrix if gl else empty, gr.matrix if gr else empty, k)
    # At a fixed eps the mixed block is exactly the outer product of the
    # factor means, which vanishes only in the limit.
    lvl_mixed, lvl_gap = 0.0, 0.0
    for idx, (e, m) in enumerate(full.levels):
        lm = gl.levels[idx][1] if gl else empty
        rm = gr.levels[idx][1] if gr else empty
        mf = [numerics.integrate(p, x, e, f).value for f in fc]
        mg = [numerics.integrate(q, y, e, g).value for g in gc]
        resid = np.array(m, dtype=float)
        resid[:k, k:] -= np.outer(mf, mg)
        a, b = _block_stats(resid, lm, rm, k)
        lvl_mixed, lvl_gap = max(lvl_mixed, a), max(lvl_gap, b)

    centering = None
    if fs and gs:
        raw_f = lift(fs[0], pq.space, 0, dx)
        raw_g = lift(gs[0], pq.space, dx, dy)
        raw = small_scale_coefficient(pq, xy, raw_f, raw_g, schedules, rule)
        cen = full.entries[(0, k)]
        if raw.limit is not None and cen.limit is not None:
            diff = abs(raw.limit - cen.limit)
        else:
            diff = None
        centering = {
            "pair": [fs[0].label, gs[0].label],
            "uncentered": raw.limit,
            "centered": cen.limit,
            "difference": diff,
            "invariant": diff is not None and diff <= tolerance,
        }
    reliable = full.reliable and all(g.reliable for g in factors)
    verdict = reliable and max(mixed, gap, lvl_mixed, lvl_gap) <= tolerance
    notes = []
    if centering is not None and not centering["invariant"]:
        notes.append("centering changed a mixed coefficient; centered values are used for the verdict")
    return ProductReport(full.labels, full, factors, mixed, gap, lvl_mixed, lvl_gap, centering, verdict,
                         reliable, tolerance, notes)


# -- pushforward ------------------------------------------------------------------------

def pullback(phi: TestFunction, forward: Callable, domain, label: Optional[str] = None) -> TestFunction:
    """``phi o F`` as a test function on ``domain`` (same sup-bound)."""
    ev = phi.evaluator
    return TestFunction(lambda y: ev(np.asarray(forward(y), dtype=float).reshape(y.shape[0], -1)),
                        domain, phi.bound, label or f"{phi.label}∘F", bound_estimated=phi.bound_estimated)


@dataclass
class PushforwardReport:
    image_point: list
    rows: list
    coefficient_rows: list
    max_gap: float
    max_coefficient_gap: float
    tolerance: float
    passed: bool
    inversion_deviation: float
    lhs_method: str
    rhs_method: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def pushforward_check(p: ProbeFamily, x, forward: Callable, inverse: Optional[Callable],
                      phis: Sequence[TestFunction], t_grid: Sequence[float], eps_list: Sequence[float],
                      rule: Optional[QuadratureRule] = None, lhs_rule: Optional[QuadratureRule] = None,
                      schedules: Schedules = Schedules(), inverse_jacobian: Optional[Callable] = None,
                      tolerance: float = IDENTITY_TOL, coefficients: bool = True) -> PushforwardReport:
    """Compare ``Ent_{F(x),eps}(t, phi)`` on ``F_# p`` with ``Ent_{x,eps}(t, phi o F)`` on ``p``.

    The left side integrates the pushforward density (change of variables
    with a Jacobian) under ``lhs_rule``, adaptive by default, so it does
    not share nodes with the right side.  ``coefficients`` also compares
    the eps-level quadratic responses.
    """
    x = _point(x)
    z = np.asarray(forward(x[None, :]), dtype=float).reshape(-1)
    pf = make_pushforward_probe(p, forward, inverse, inverse_jacobian)
    dev = max(pf.validate(z, e, rule) for e in eps_list) if eps_list else 0.0
    lhs_rule = lhs_rule or QuadratureRule.adaptive()
    for phi in phis:
        for t in t_grid:
            if abs(t) * phi.bound > 1.0 + 1e-15:
                raise ValueError(f"t={t} violates |t| sup|{phi.label}| <= 1")
    stochastic = any(r is not None and r.kind == "monte-carlo" for r in (rule, lhs_rule))
    rows, worst = [], 0.0
    for phi in phis:
        pulled = pullback(phi, forward, p.space)
        for e in eps_list:
            for t in t_grid:
                lhs = entropy_response(pf, z, e, phi, t, lhs_rule)
                rhs = entropy_response(p, x, e, pulled, t, rule)
                gap = abs(lhs.value - rhs.value)
                allowed = 3.0 * math.hypot(lhs.error, rhs.error) if stochastic else tolerance
                rows.append({"function": phi.label, "eps": e, "t": t, "pushforward": lhs.value,
                             "pulled_back": rhs.value, "gap": gap, "allowed": allowed})
                worst = max(worst, gap - allowed + tolerance) if stochastic else max(worst, gap)
    crow, cworst = [], 0.0
    if coefficients:
        for phi in phis:
            pulled = pullback(phi, forward, p.space)
            for e in eps_list:
                a = quadratic_response(pf, z, e, phi, schedules, lhs_rule)
                b = quadratic_response(p, x, e, pulled, schedules, rule)
                g = abs(a.value - b.value)
                cworst = max(cworst, g)
                crow.append({"function": phi.label, "eps": e, "pushforward": a.value,
                             "pulled_back": b.value, "gap": g})
    passed = worst <= tolerance and (not coefficients or stochastic or cworst <= tolerance)
    lhs_m = "adaptive" if lhs_rule.kind == "adaptive" else lhs_rule.kind
    rhs_m = (rule or p.native_rule()).kind
    return PushforwardReport(z.tolist(), rows, crow, worst, cworst, tolerance, passed, dev, lhs_m, rhs_m)


# -- submanifolds -----------------------------------------------------------------------

@dataclass
class SubmanifoldReport:
    point: list
    deltas: list
    eps_values: list
    per_delta: list
    extrapolated: list
    intrinsic: list
    max_gap: float
    tolerance: float
    passed: bool
    restriction: Optional[dict]
    reports: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def submanifold_check(ambient: GaussianProbe, constraint_index: int, deltas: Sequence[float],
                      intrinsic: ProbeFamily, x, funcs: Sequence[TestFunction],
                      schedules: Schedules = Schedules(), rule: Optional[QuadratureRule] = None,
                      eps_values: Optional[Sequence[float]] = None, tolerance: float = 1e-3,
                      ambient_funcs: Optional[Sequence[TestFunction]] = None) -> SubmanifoldReport:
    """Slab-conditioned Grams, extrapolated ``delta -> 0``, against the intrinsic probe.

    ``funcs`` live on the ambient space and must not depend on the
    constrained coordinate.  The intrinsic side evaluates them on the
    embedding that inserts 0 at ``constraint_index``.  The conditioned
    values are smooth in ``delta^2``, which is the extrapolation variable.
    ``ambient_funcs`` (default: ``funcs`` plus the constrained coordinate)
    feed the principal-submatrix check.
    """
    x = _point(x)
    if abs(x[constraint_index]) > 1e-12:
        raise ValueError("base point must lie on the constrained set")
    deltas = sorted((float(d) for d in deltas), reverse=True)
    if len(deltas) < 3:
        raise ValueError("need at least 3 slab half-widths")
    eps_values = list(eps_values) if eps_values else [schedules.eps0]
    funcs = list(funcs)
    k = len(funcs)
    keep = [i for i in range(ambient.dim) if i != constraint_index]

    def embed(u):
        u = np.atleast_2d(u)
        out = np.zeros((u.shape[0], ambient.dim))
        out[:, keep] = u
        return out

    intrinsic_funcs = [pullback(f, embed, intrinsic.space, f.label) for f in funcs]
    xi = x[keep]
    per_delta, extrap, intr, reports = [], [], [], []
    worst = 0.0
    for e in eps_values:
        mats = []
        for d in deltas:
            rp = make_restricted_probe(ambient, slab(ambient.space, constraint_index, d))
            mats.append(gram_matrix(rp, x, funcs, schedules, rule, eps=e).matrix)
        per_delta.append({"eps": e, "matrices": [_matrix_list(m) for m in mats]})
        ext = np.zeros((k, k))
        for i in range(k):
            for j in range(i, k):
                rep = numerics.richardson_limit([(d * d, m[i, j]) for d, m in zip(deltas, mats)], 1.0,
                                                schedules.tol)
                ext[i, j] = ext[j, i] = rep.limit
                reports.append({"eps": e, "entry": [i, j], "report": rep.to_dict()})
        g_int = gram_matrix(intrinsic, xi, intrinsic_funcs, schedules, eps=e).matrix
        extrap.append({"eps": e, "matrix": _matrix_list(ext)})
        intr.append({"eps": e, "matrix": _matrix_list(g_int)})
        worst = max(worst, float(np.max(np.abs(ext - g_int), initial=0.0)))

    restriction = None
    if ambient_funcs is None and k:
        c = TestFunction(lambda y: y[:, constraint_index] - x[constraint_index], ambient.space,
                         funcs[0].bound, f"y{constraint_index + 1}")
        ambient_funcs = funcs + [c]
    if ambient_funcs:
        g_amb = gram_matrix(ambient, x, ambient_funcs, schedules, rule, eps=eps_values[0])
        sub = g_amb.matrix[:k, :k]
        sub_pd = numerics.is_positive_definite(sub)
        restriction = {
            "ambient": g_amb.to_dict(),
            "leading_minor_min_eigenvalue": numerics.min_eigenvalue(sub) if k else None,
            "leading_minor_pd": sub_pd,
            "implication_holds": (not g_amb.pd) or sub_pd,
        }
    passed = worst <= tolerance and (restriction is None or restriction["implication_holds"])
    return SubmanifoldReport(x.tolist(), deltas, eps_values, per_delta, extrap, intr, worst, tolerance,
                             passed, restriction, reports)


# -- rank classification ----------------------------------------------------------------

@dataclass
class MapRankReport:
    point: list
    image_point: list
    domain_dim: int
    codomain_dim: int
    pullback_gram: InformationGram
    rank: int
    jacobian: list
    jacobian_rank: int
    immersion: bool
    submersion: bool
    classification: str
    consistent: bool
    rank_tol: float

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["pullback_gram"] = self.pullback_gram.to_dict()
        return out


def _chart_map(funcs):
    return lambda y: np.stack([f(y) for f in funcs], axis=1)


def _directional_pullback(codomain_chart, forward, domain, x):
    """Codomain chart pulled back through ``F``, centered and normalized along rays at ``x``."""
    G = _chart_map(codomain_chart)
    gx = G(np.asarray(forward(x[None, :]), dtype=float).reshape(1, -1))[0]
    out = []
    for j, g in enumerate(codomain_chart):
        def h(y, j=j):
            u = G(np.asarray(forward(y), dtype=float).reshape(y.shape[0], -1)) - gx
            r = np.linalg.norm(u, axis=1)
            safe = np.where(r > 0, r, 1.0)
            return np.where(r > 0, u[:, j] / safe, 0.0)
        out.append(TestFunction(h, domain, 1.0, f"pull({g.label})"))
    return out


def rank_classify(p: ProbeFamily, forward: Callable, domain_chart: Sequence[TestFunction],
                  codomain_chart: Sequence[TestFunction], x, schedules: Schedules = Schedules(),
                  rule: Optional[QuadratureRule] = None, rank_tol: float = 1e-6,
                  step: float = 1e-5) -> MapRankReport:
    """Gram rank of the pulled-back codomain chart against the Jacobian rank of ``F``.

    The codomain chart functions are composed with ``F``, centered at
    ``x`` and normalized along rays, so the small-scale Gram sees the
    directions into which ``F`` maps a neighborhood rather than the
    (rank-one) values.  The oracle is the finite-difference Jacobian of
    the map in chart coordinates.
    """
    x = _point(x)
    dom, cod = list(domain_chart), list(codomain_chart)
    dx, dy = len(dom), len(cod)
    if dx != p.dim:
        raise ChartError(f"domain chart has {dx} functions for a {p.dim}-dimensional space")
    fx = np.asarray(forward(x[None, :]), dtype=float).reshape(1, -1)
    j_dom = numerics.jacobian_fd(_chart_map(dom), x[None, :], step)[0]
    if numerics.numerical_rank(j_dom, 1e-8) < dx:
        raise ChartError(f"domain chart is singular at {x.tolist()}")
    j_cod = numerics.jacobian_fd(_chart_map(cod), fx, step)[0]
    if numerics.numerical_rank(j_cod, 1e-8) < min(j_cod.shape):
        raise ChartError(f"codomain chart is singular at {fx[0].tolist()}")
    composite = lambda y: _chart_map(cod)(np.asarray(forward(y), dtype=float).reshape(y.shape[0], -1))
    jac = numerics.jacobian_fd(composite, x[None, :], step)[0] @ np.linalg.inv(j_dom)
    jac_rank = numerics.numerical_rank(jac, rank_tol)

    h = _directional_pullback(cod, forward, p.space, x)
    gram = gram_matrix(p, x, h, schedules, rule)
    rank = numerics.numerical_rank(gram.matrix, rank_tol) if gram.reliable else -1
    immersion, submersion = rank == dx, rank == dy
    if immersion and submersion:
        cls = "local-diffeo"
    elif immersion:
        cls = "immersion"
    elif submersion:
        cls = "submersion"
    else:
        cls = "degenerate"
    return MapRankReport(x.tolist(), fx[0].tolist(), dx, dy, gram, rank, _matrix_list(jac), jac_rank,
                         immersion, submersion, cls, rank == jac_rank, rank_tol)


# -- stability --------------------------------------------------------------------------

@dataclass
class StabilityTrace:
    indices: list
    grams: list
    limit_gram: InformationGram
    min_eigenvalues: list
    limit_min_eigenvalue: float
    gaps: list
    matrix_gaps: list
    pd: list
    k0: Optional[int]
    rate: float
    fitted_constant: Optional[float]
    observed_rate: Optional[float]
    reliable: bool

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["grams"] = [g.to_dict() for g in self.grams]
        out["limit_gram"] = self.limit_gram.to_dict()
        return out


def stability_sweep(probes: Sequence[ProbeFamily], limit_probe: ProbeFamily, x,
                    funcs: Sequence[TestFunction], schedules: Schedules = Schedules(),
                    rule: Optional[QuadratureRule] = None, rate: float = 0.5,
                    margin: float = PD_MARGIN) -> StabilityTrace:
    """Gram of ``funcs`` along a probe sequence and at its limit.

    ``fitted_constant`` is the smallest ``C`` with ``gap_k <= C * rate^k``
    on the tested range; ``observed_rate`` is the geometric-mean ratio of
    successive gaps.  ``k0`` is the first index after which every Gram and
    the limit Gram are PD, ``None`` when there is no such trailing run.
    """
    if len(probes) < 3:
        raise ValueError("stability_sweep needs at least 3 sequence members")
    grams = [gram_matrix(pk, x, funcs, schedules, rule, margin=margin) for pk in probes]
    lim = gram_matrix(limit_probe, x, funcs, schedules, rule, margin=margin)
    lams = [g.min_eigenvalue for g in grams]
    gaps = [abs(l - lim.min_eigenvalue) for l in lams]
    mgaps = [float(np.max(np.abs(g.matrix - lim.matrix))) for g in grams]
    pd = [g.pd for g in grams]
    k0 = None
    if lim.pd:
        for k in range(len(pd) - 1, -1, -1):
            if pd[k]:
                k0 = k
            else:
                break
    fitted = max((gap / rate**k for k, gap in enumerate(gaps)), default=None)
    positive = [(k, g) for k, g in enumerate(gaps) if g > 0]
    observed = None
    if len(positive) >= 2:
        (k1, g1), (k2, g2) = positive[0], positive[-1]
        if k2 > k1:
            observed = (g2 / g1) ** (1.0 / (k2 - k1))
    reliable = lim.reliable and all(g.reliable for g in grams)
    return StabilityTrace(list(range(len(probes))), grams, lim, lams, lim.min_eigenvalue, gaps, mgaps,
                          pd, k0, rate, fitted, observed, reliable)


# -- rigidity ---------------------------------------------------------------------------

@dataclass
class RigidityReport:
    battery: list
    points: list
    per_function: list
    max_discrepancy: float
    threshold: float
    verdict: str
    warnings: list

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def rigidity_compare(p1: ProbeFamily, p2: ProbeFamily, battery: Sequence[TestFunction], points: Sequence,
                     schedules: Schedules = Schedules(), rule1: Optional[QuadratureRule] = None,
                     rule2: Optional[QuadratureRule] = None,
                     threshold: float = RIGIDITY_THRESHOLD) -> RigidityReport:
    """Largest gap between the small-scale coefficients of two probe systems."""
    battery = list(battery)
    if not battery:
        raise ValueError("battery must not be empty")
    rows, warns, worst = [], [], 0.0
    for f in battery:
        for x in points:
            c1 = small_scale_coefficient(p1, x, f, None, schedules, rule1)
            c2 = small_scale_coefficient(p2, x, f, None, schedules, rule2)
            pt = _point(x).tolist()
            if c1.limit is None or c2.limit is None:
                msg = f"{f.label} at {pt}: limit did not converge; entry excluded"
                log.warning(msg)
                warns.append(msg)
                rows.append({"function": f.label, "point": pt, "first": c1.limit, "second": c2.limit,
                             "gap": None})
                continue
            gap = abs(c1.limit - c2.limit)
            worst = max(worst, gap)
            rows.append({"function": f.label, "point": pt, "first": c1.limit, "second": c2.limit,
                         "gap": gap})
    verdict = "distinct" if worst > threshold else "indistinguishable"
    return RigidityReport([f.label for f in battery], [_point(x).tolist() for x in points], rows, worst,
                          threshold, verdict, warns)
