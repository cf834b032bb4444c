"""Shared builders for the test suite."""

import json
from pathlib import Path

import numpy as np

from entroscope.expr import make_test_function
from entroscope.numerics import quadrature_nodes

DATA = Path(__file__).resolve().parent / "data"
ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

# Ten bounded-on-the-probe-support functions written against two
# placeholder variables; ``{u}`` and ``{w}`` become the space's variables.
BATTERY = [
    "2",
    "{u} + 1",
    "sin({u})",
    "cos({u}) + {u}",
    "exp(0 - {u}^2)",
    "2 * atan({u})",
    "{u}^2 - 3 * {u}",
    "bump({u} / 3)",
    "sqrt(1 + {u}^2)",
    "sin({u}) * cos({w}) + {w}",
]

# Parser round-trip corpus (more than fifty entries, variables y1..y3).
EXPRESSIONS = [
    "1", "0.5", "1e-3", "2.5e2", "y1", "y2", "y3", "-y1", "--y1", "-(y1 + y2)",
    "y1 + y2", "y1 - y2", "y1 * y2", "y1 / y2", "y1 - y2 - y3", "y1 - (y2 - y3)",
    "y1 / y2 / y3", "y1 / (y2 / y3)", "y1 * y2 / y3", "y1 * (y2 / y3)",
    "y1^2", "y1^0", "(y1 + 1)^3", "-y1^2", "(-y1)^2", "-(y1^2)", "(y1^2)^3",
    "sin(y1)", "cos(y2)", "exp(y3)", "sqrt(y1 * y1 + 1)", "abs(y1 - y2)", "atan(y2 / 3)",
    "norm(y1)", "norm(y1, y2)", "norm(y1, y2, y3)", "bump(y1)", "bump(y1, y2)", "bump(y1 / 2, y2 * 2, y3)",
    "y1 / norm(y1, y2)", "(y1 - 0.5) / norm(y1 - 0.5, y2)", "sin(y1) * cos(y2) + y3",
    "exp(0 - y1^2 - y2^2)", "1 / (1 + y1^2)", "2 * atan(y1) / 3.141592653589793",
    "sin(cos(exp(y1)))", "sqrt(abs(y1)) + abs(sqrt(y2 * y2))", "y1 * (y2 + y3) * (y1 - y3)",
    "((y1))", "(y1 + y2) * (y1 - y2)", "y1 + y2 * y3", "(y1 + y2) * y3", "y1 - -y2",
    "y1 * -y2", "-y1 * y2", "-sin(y1)^2", "3 - 2 - 1", "3 - (2 - 1)", "12 / 4 / 3",
    "norm(sin(y1), cos(y1))", "bump(norm(y1, y2) / 2)",
]


def node_cloud(probes_and_points, eps=0.25):
    """Union of the native quadrature nodes of each ``(probe, point)`` at ``eps``."""
    return np.vstack([quadrature_nodes(p, np.asarray(x, dtype=float), eps).points
                      for p, x in probes_and_points])


def bounded(src, space, probes_and_points, bound=None, label=None):
    """Test function whose estimated sup-bound covers every node the probes use."""
    cloud = node_cloud(probes_and_points)
    box = (cloud.min(axis=0), cloud.max(axis=0))
    return make_test_function(src, space, bound, box, cloud, label)


def battery(space, probes_and_points):
    names = space.variables()
    u, w = names[0], names[-1]
    return [bounded(t.format(u=u, w=w), space, probes_and_points) for t in BATTERY]


def oracle():
    return json.loads((DATA / "directional_oracle.json").read_text())
