"""Scenario ingestion and dispatch to the verifiers.

A scenario is a JSON document (see ``schemas/scenario.schema.json``);
:func:`run_scenario` returns a report dictionary and its exit code.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from . import __version__, numerics, verify
from .entropy import Schedules, small_scale_coefficient
from .expr import EvaluationError, ExpressionError, compile_expression, make_test_function, parse_expression
from .numerics import QuadratureRule
from .probes import (
    GaussianProbe,
    ProbeConstructionError,
    ProbeFamily,
    PushforwardProbe,
    RestrictedProbe,
    make_circle_probe,
    make_gaussian_probe,
    make_mollifier_probe,
    make_product_probe,
    make_pushforward_probe,
    make_restricted_probe,
    probe_diagnostics,
)
from .report import SCHEMA_VERSION, to_plain, validate
from .spaces import ModelSpace, circle, euclidean, product, slab

__all__ = ["ScenarioError", "run_scenario", "build_space", "build_probe", "EXIT_OK", "EXIT_VERDICT",
           "EXIT_NONCONVERGED", "EXIT_INPUT"]

EXIT_OK, EXIT_VERDICT, EXIT_NONCONVERGED, EXIT_INPUT = 0, 2, 3, 4

DEFAULT_TOLERANCES = {
    "coefficient": 1e-6,
    "pd_margin": verify.PD_MARGIN,
    "identity": verify.IDENTITY_TOL,
    "submanifold": 1e-3,
    "rank": 1e-6,
    "rigidity": verify.RIGIDITY_THRESHOLD,
    "mass": 1e-8,
}


class ScenarioError(ValueError):
    """The scenario is well-formed JSON but cannot be executed as written."""


# -- builders -----------------------------------------------------------------------

def build_space(d: dict) -> ModelSpace:
    kind = d["kind"]
    if kind == "euclidean":
        if "dim" not in d:
            raise ScenarioError("euclidean space needs 'dim'")
        return euclidean(d["dim"])
    if kind == "circle":
        return circle()
    if kind == "product":
        return product(build_space(d["left"]), build_space(d["right"]))
    return slab(build_space(d["ambient"]), d["constraint_index"], d["half_width"])


def compile_map(exprs: list, domain: ModelSpace) -> Callable:
    """Vector map ``(N, dim) -> (N, len(exprs))`` from component expressions."""
    evs = [compile_expression(parse_expression(e, domain), domain, e) for e in exprs]
    return lambda y: np.stack([ev(np.atleast_2d(y)) for ev in evs], axis=1)


def build_probe(d: dict) -> ProbeFamily:
    kind = d["kind"]
    if kind == "gaussian":
        if "dim" not in d:
            raise ScenarioError("gaussian probe needs 'dim'")
        return make_gaussian_probe(d["dim"], d.get("shape"))
    if kind == "wrapped-gaussian":
        return make_circle_probe()
    if kind == "product":
        return make_product_probe(build_probe(d["left"]), build_probe(d["right"]))
    if kind == "pushforward":
        base = build_probe(d["base"])
        fwd = compile_map(d["forward"], base.space)
        if len(d["forward"]) != base.dim:
            raise ScenarioError("pushforward map must preserve dimension")
        inv = compile_map(d["inverse"], euclidean(base.dim)) if "inverse" in d else None
        return make_pushforward_probe(base, fwd, inv, label="F")
    if kind == "mollifier":
        dim = d.get("dim", 1)
        chart = compile_map(d["chart"], euclidean(dim)) if "chart" in d else None
        chart_inv = compile_map(d["chart_inverse"], euclidean(dim)) if "chart_inverse" in d else None
        return make_mollifier_probe(dim, d.get("kernel", "cosine-bump"), chart, chart_inv)
    base = build_probe(d["base"])
    if "constraint_index" not in d or "half_width" not in d:
        raise ScenarioError("restricted probe needs 'constraint_index' and 'half_width'")
    return make_restricted_probe(base, slab(base.space, d["constraint_index"], d["half_width"]))


def build_point(p, space: ModelSpace) -> np.ndarray:
    if isinstance(p, dict):
        if space.kind != "circle":
            raise ScenarioError("{'theta': ...} points are only valid on the circle")
        return np.array([float(p["theta"])])
    x = np.asarray(p, dtype=float)
    if x.shape != (space.dim,):
        raise ScenarioError(f"point {p} does not have dimension {space.dim}")
    return x


def build_rule(d: Optional[dict], seed: Optional[int]) -> Optional[QuadratureRule]:
    if d is None:
        return None
    d = dict(d)
    if d["kind"] == "monte-carlo":
        if seed is None and "seed" not in d:
            raise ScenarioError("monte-carlo quadrature needs a seed")
        if seed is not None:
            d["seed"] = seed
    return QuadratureRule.from_dict(d)


def build_schedules(d: Optional[dict]) -> Schedules:
    return Schedules(**(d or {}))


class _Context:
    """Everything a command needs, resolved from the scenario."""

    def __init__(self, s: dict, seed: Optional[int]):
        self.s = s
        self.seed = seed
        self.schedules = build_schedules(s.get("schedules"))
        self.rule = build_rule(s.get("quadrature"), seed)
        self.tol = dict(DEFAULT_TOLERANCES, **s.get("tolerances", {}))
        self.bounds: list = []

    def functions(self, key: str, space: ModelSpace, probes_at: list, required: bool = True) -> list:
        specs = self.s.get(key)
        if specs is None:
            if required:
                raise ScenarioError(f"scenario needs '{key}'")
            return []
        box, extra = self.region(probes_at, space)
        out = []
        for spec in specs:
            f = make_test_function(spec["expr"], space, spec.get("bound"), box, extra, spec.get("label"))
            self.bounds.append({"function": f.label, "bound": f.bound, "estimated": f.bound_estimated})
            out.append(f)
        return out

    def region(self, probes_at: list, space: ModelSpace):
        """Box and node cloud over which estimated sup-bounds are taken."""
        los, his, pts = [], [], []
        eps = self.schedules.eps0
        for p, x in probes_at:
            lo, hi = p.support_box(x, eps)
            los.append(lo)
            his.append(hi)
            try:
                rule = self.rule if self.rule is not None and self.rule.kind != "adaptive" else None
                pts.append(numerics.quadrature_nodes(p, x, eps, rule).points)
            except numerics.IntegrationError:
                pass
        if not los:
            return None, None
        lo, hi = np.min(los, axis=0), np.max(his, axis=0)
        if lo.shape[0] != space.dim:
            return None, None
        return (lo, hi), (np.vstack(pts) if pts else None)


def _probe_and_point(ctx: _Context):
    if "probe" not in ctx.s:
        raise ScenarioError("scenario needs 'probe'")
    p = build_probe(ctx.s["probe"])
    if "space" in ctx.s and build_space(ctx.s["space"]) != p.space:
        raise ScenarioError(f"declared space {ctx.s['space']} does not match the probe's space "
                            f"{p.space.describe()}")
    if "point" not in ctx.s:
        raise ScenarioError("scenario needs 'point'")
    return p, build_point(ctx.s["point"], p.space)


def _verdict(actual: str, natural_pass: bool, expected: Optional[str]) -> tuple[str, bool]:
    if expected is not None:
        return actual, actual == expected
    return actual, natural_pass


# -- commands -----------------------------------------------------------------------

def _cmd_coeff(ctx: _Context, joint: bool = False):
    p, x = _probe_and_point(ctx)
    funcs = ctx.functions("functions", p.space, [(p, x)])
    if joint and len(funcs) != 2:
        raise ScenarioError("joint needs exactly two functions")
    if not funcs:
        raise ScenarioError("no functions given")
    if joint:
        ests = [small_scale_coefficient(p, x, funcs[0], funcs[1], ctx.schedules, ctx.rule)]
    else:
        ests = [small_scale_coefficient(p, x, f, None, ctx.schedules, ctx.rule) for f in funcs]
    converged = all(e.converged and e.limit is not None for e in ests)
    expected = ctx.s.get("expected")
    rows = []
    match = True
    for i, e in enumerate(ests):
        row = e.to_dict()
        row["max_level_agreement"] = max(abs(l.value - l.analytic) for l in e.per_eps)
        if expected is not None:
            if len(expected) != len(ests):
                raise ScenarioError(f"'expected' has {len(expected)} values for {len(ests)} coefficients")
            gap = None if e.limit is None else abs(e.limit - expected[i])
            row["expected"] = expected[i]
            row["expected_gap"] = gap
            match = match and gap is not None and gap <= ctx.tol["coefficient"]
        rows.append(row)
    if expected is not None:
        actual = "match" if match else "mismatch"
    else:
        actual = "converged" if converged else "not-converged"
    return {"point": x.tolist(), "coefficients": rows}, actual, match, converged


def _stochastic_errors(p, x, eps, funcs, rule) -> Optional[list]:
    if rule is None or rule.kind != "monte-carlo":
        return None
    ns = numerics.quadrature_nodes(p, x, eps, rule)
    vals = [f(ns.points) for f in funcs]
    n = ns.size
    return [[float(np.std(a * b, ddof=1) / math.sqrt(n)) for b in vals] for a in vals]


def _cmd_gram(ctx: _Context):
    p, x = _probe_and_point(ctx)
    funcs = ctx.functions("functions", p.space, [(p, x)])
    if not funcs:
        raise ScenarioError("gram needs at least one function")
    g = verify.gram_matrix(p, x, funcs, ctx.schedules, ctx.rule, ctx.s.get("eps"), ctx.tol["pd_margin"])
    res = g.to_dict(detail=True)
    eps_se = ctx.s.get("eps", ctx.schedules.eps_values()[-1])
    res["standard_errors"] = _stochastic_errors(p, x, eps_se, funcs, ctx.rule)
    actual = "pd" if g.pd else "not-pd"
    return res, actual, bool(g.pd), g.reliable


def _cmd_chart(ctx: _Context):
    p, x = _probe_and_point(ctx)
    reg = ctx.s.get("region")
    if reg is None:
        raise ScenarioError("chart needs 'region'")
    lo, hi = np.asarray(reg["lo"], float), np.asarray(reg["hi"], float)
    funcs = ctx.functions("functions", p.space, [(p, x), (p, lo), (p, hi)])
    r = verify.chart_check(p, x, funcs, (lo, hi), ctx.schedules, ctx.rule, ctx.s.get("samples", 256),
                           ctx.s.get("nearby", 8), ctx.s.get("eps"), ctx.tol["pd_margin"])
    converged = all(g.reliable for g in r.grams)
    return r.to_dict(), r.verdict, r.is_chart, converged


def _cmd_product(ctx: _Context):
    pq, xy = _probe_and_point(ctx)
    if pq.kind != "product":
        raise ScenarioError("product needs a product probe")
    p, q = pq.left, pq.right
    x, y = xy[: p.dim], xy[p.dim:]
    fs = ctx.functions("left_functions", p.space, [(p, x)], required=False)
    gs = ctx.functions("right_functions", q.space, [(q, y)], required=False)
    r = verify.product_check(p, q, x, y, fs, gs, ctx.schedules, ctx.rule, ctx.tol["identity"])
    actual = "block-diagonal" if r.verdict else "not-block-diagonal"
    return r.to_dict(), actual, r.verdict, r.reliable


def _cmd_pushforward(ctx: _Context):
    p, x = _probe_and_point(ctx)
    m = ctx.s.get("map")
    if m is None:
        raise ScenarioError("pushforward needs 'map'")
    if len(m["forward"]) != p.dim:
        raise ScenarioError("pushforward map must preserve dimension")
    fwd = compile_map(m["forward"], p.space)
    inv = compile_map(m["inverse"], euclidean(p.dim)) if "inverse" in m else None
    eps_list = ctx.s.get("eps_values", [ctx.schedules.eps0])
    pf = make_pushforward_probe(p, fwd, inv)
    z = fwd(x[None, :])[0]
    for e in eps_list:
        pf.validate(z, e, ctx.rule)
    phis = ctx.functions("functions", pf.space, [(pf, z)])
    t_grid = ctx.s.get("t_grid", [-0.3, -0.1, 0.1, 0.3])
    r = verify.pushforward_check(p, x, fwd, inv, phis, t_grid, eps_list, ctx.rule, schedules=ctx.schedules,
                                 tolerance=ctx.tol["identity"])
    actual = "invariant" if r.passed else "not-invariant"
    return r.to_dict(), actual, r.passed, True


def _cmd_submanifold(ctx: _Context):
    amb, x = _probe_and_point(ctx)
    if not isinstance(amb, GaussianProbe):
        raise ScenarioError("submanifold needs a gaussian ambient probe")
    c = ctx.s.get("constraint_index")
    deltas = ctx.s.get("deltas")
    if c is None or deltas is None:
        raise ScenarioError("submanifold needs 'constraint_index' and 'deltas'")
    if not 0 <= c < amb.dim or amb.dim < 2:
        raise ScenarioError("constraint index out of range")
    if "intrinsic" in ctx.s:
        intr = build_probe(ctx.s["intrinsic"])
    else:
        keep = [i for i in range(amb.dim) if i != c]
        S = amb.shape
        schur = S[np.ix_(keep, keep)] - np.outer(S[keep, c], S[c, keep]) / S[c, c]
        intr = make_gaussian_probe(amb.dim - 1, schur)
    funcs = ctx.functions("functions", amb.space, [(amb, x)])
    r = verify.submanifold_check(amb, c, deltas, intr, x, funcs, ctx.schedules, ctx.rule,
                                 ctx.s.get("eps_values"), ctx.tol["submanifold"])
    actual = "restricts" if r.passed else "mismatch"
    return r.to_dict(), actual, r.passed, True


def _cmd_rank(ctx: _Context):
    if "probe" not in ctx.s:
        raise ScenarioError("scenario needs 'probe'")
    p = build_probe(ctx.s["probe"])
    m, cod_d = ctx.s.get("map"), ctx.s.get("codomain_space")
    if m is None or cod_d is None:
        raise ScenarioError("rank needs 'map' and 'codomain_space'")
    cod_space = build_space(cod_d)
    fwd = compile_map(m["forward"], p.space)
    if len(m["forward"]) != cod_space.dim:
        raise ScenarioError("map components do not match the codomain dimension")
    pts_raw = ctx.s.get("points") or ([ctx.s["point"]] if "point" in ctx.s else None)
    if not pts_raw:
        raise ScenarioError("rank needs 'points'")
    pts = [build_point(q, p.space) for q in pts_raw]
    dom = ctx.functions("domain_chart", p.space, [(p, q) for q in pts])
    cod_box_pts = np.vstack([fwd(q[None, :]) for q in pts])
    spread = np.max(np.abs(cod_box_pts)) + 10.0
    box = (cod_box_pts.min(axis=0) - spread, cod_box_pts.max(axis=0) + spread)
    cod = []
    for spec in ctx.s.get("codomain_chart", []):
        f = make_test_function(spec["expr"], cod_space, spec.get("bound"), box, None, spec.get("label"))
        ctx.bounds.append({"function": f.label, "bound": f.bound, "estimated": f.bound_estimated})
        cod.append(f)
    if not cod:
        raise ScenarioError("rank needs 'codomain_chart'")
    reports = []
    for q in pts:
        try:
            reports.append(verify.rank_classify(p, fwd, dom, cod, q, ctx.schedules, ctx.rule, ctx.tol["rank"]))
        except verify.ChartError as exc:
            raise ScenarioError(str(exc)) from exc
    classes = sorted({r.classification for r in reports})
    actual = classes[0] if len(classes) == 1 else "mixed"
    consistent = all(r.consistent for r in reports)
    converged = all(r.pullback_gram.reliable for r in reports)
    res = {"points": [r.to_dict() for r in reports], "consistent": consistent}
    return res, actual, consistent, converged


def _sequence(base: GaussianProbe, d: dict) -> list:
    kind, count, b = d.get("kind", "axis-scaled"), d.get("count", 7), d.get("base", 2.0)
    out = []
    for k in range(count):
        s = base.shape.copy()
        if kind == "axis-scaled":
            ax = d.get("axis", 0)
            if not 0 <= ax < base.dim:
                raise ScenarioError("sequence axis out of range")
            s[ax, :] *= math.sqrt(1 + b**-k)
            s[:, ax] *= math.sqrt(1 + b**-k)
        elif kind == "isotropic-scaled":
            s = s * (1 + b**-k)
        out.append(make_gaussian_probe(base.dim, s))
    return out


def _cmd_stability(ctx: _Context):
    base, x = _probe_and_point(ctx)
    if not isinstance(base, GaussianProbe):
        raise ScenarioError("stability sequences are built from a gaussian probe")
    seq = _sequence(base, ctx.s.get("sequence", {}))
    funcs = ctx.functions("functions", base.space, [(pk, x) for pk in seq])
    r = verify.stability_sweep(seq, base, x, funcs, ctx.schedules, ctx.rule, ctx.s.get("rate", 0.5),
                               ctx.tol["pd_margin"])
    actual = "stable" if r.k0 is not None else "unstable"
    return r.to_dict(), actual, r.k0 is not None, r.reliable


def _cmd_rigidity(ctx: _Context):
    if "probes" not in ctx.s:
        raise ScenarioError("rigidity needs 'probes'")
    p1, p2 = (build_probe(d) for d in ctx.s["probes"])
    if p1.space != p2.space:
        raise ScenarioError("rigidity probes must live on the same space")
    pts_raw = ctx.s.get("points") or ([ctx.s["point"]] if "point" in ctx.s else None)
    if not pts_raw:
        raise ScenarioError("rigidity needs 'points'")
    pts = [build_point(q, p1.space) for q in pts_raw]
    qs = ctx.s.get("quadratures")
    r1, r2 = (build_rule(q, ctx.seed) for q in qs) if qs else (ctx.rule, ctx.rule)
    funcs = ctx.functions("functions", p1.space, [(p, q) for q in pts for p in (p1, p2)])
    r = verify.rigidity_compare(p1, p2, funcs, pts, ctx.schedules, r1, r2, ctx.tol["rigidity"])
    converged = not r.warnings
    return r.to_dict(), r.verdict, r.verdict == "indistinguishable", converged


def _cmd_diagnostics(ctx: _Context):
    p, x = _probe_and_point(ctx)
    eps_list = ctx.s.get("eps_values", ctx.schedules.eps_values()[:3])
    rows, mass_ok = [], True
    for e in eps_list:
        d = probe_diagnostics(p, x, e, ctx.rule)
        row = d.to_dict()
        row["eps"] = e
        row["mass_gap"] = abs(d.mass - 1.0)
        row["mean_gap"] = float(np.max(np.abs(d.mean - x)))
        row["covariance_trace"] = float(np.trace(d.covariance))
        mass_ok = mass_ok and row["mass_gap"] <= ctx.tol["mass"]
        rows.append(row)
    order = sorted(range(len(eps_list)), key=lambda i: -eps_list[i])
    traces = [rows[i]["covariance_trace"] for i in order]
    shrinking = all(b < a for a, b in zip(traces, traces[1:]))
    ok = mass_ok and shrinking
    res = {"point": x.tolist(), "levels": rows, "mass_within_tolerance": mass_ok,
           "covariance_shrinks": shrinking}
    return res, "pass" if ok else "fail", ok, True


_COMMANDS = {
    "coeff": _cmd_coeff,
    "joint": lambda ctx: _cmd_coeff(ctx, joint=True),
    "gram": _cmd_gram,
    "chart": _cmd_chart,
    "product": _cmd_product,
    "pushforward": _cmd_pushforward,
    "submanifold": _cmd_submanifold,
    "rank": _cmd_rank,
    "stability": _cmd_stability,
    "rigidity": _cmd_rigidity,
    "diagnostics": _cmd_diagnostics,
}


# -- entry point --------------------------------------------------------------------

def _document(scenario, results, diagnostics, verdicts) -> dict:
    return {
        "scenario": scenario,
        "results": results,
        "diagnostics": diagnostics,
        "verdicts": verdicts,
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
    }


def run_scenario(s: dict, seed: Optional[int] = None) -> tuple[dict, int]:
    """Execute a scenario; returns ``(report, exit_code)``.

    ``seed`` overrides the scenario seed.  Input problems (schema
    violations, parse errors, construction failures) give exit code 4 and
    a report carrying the error message.
    """
    import jsonschema

    echo = dict(s) if isinstance(s, dict) else None
    try:
        validate(s, "scenario")
        eff_seed = seed if seed is not None else s.get("seed")
        if echo is not None and eff_seed is not None:
            echo["seed"] = eff_seed
        ctx = _Context(s, eff_seed)
        results, actual, natural, converged = _COMMANDS[s["command"]](ctx)
    except (jsonschema.ValidationError, ScenarioError, ExpressionError, EvaluationError,
            ProbeConstructionError, numerics.IntegrationError, ValueError, KeyError, TypeError) as exc:
        msg = f"{type(exc).__name__}: {exc.message if hasattr(exc, 'message') else exc}"
        verdicts = {"verdict": "input-error", "expected": None, "pass": False, "converged": False,
                    "exit_code": EXIT_INPUT, "error": msg}
        return to_plain(_document(echo, None, {}, verdicts)), EXIT_INPUT
    expected = s.get("expected_verdict")
    actual, passed = _verdict(actual, natural, expected)
    code = EXIT_NONCONVERGED if not converged else (EXIT_OK if passed else EXIT_VERDICT)
    diagnostics = {
        "schedules": ctx.schedules.to_dict(),
        "quadrature": None if ctx.rule is None else ctx.rule.describe(),
        "seed": eff_seed,
        "bounds": ctx.bounds,
    }
    verdicts = {"verdict": actual, "expected": expected, "pass": bool(passed), "converged": bool(converged),
                "exit_code": code}
    return to_plain(_document(echo, results, diagnostics, verdicts)), code
