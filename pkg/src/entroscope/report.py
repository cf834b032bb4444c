"""Deterministic JSON emission for verification reports."""

from __future__ import annotations

import dataclasses
import json
import math
from importlib import resources

import numpy as np

__all__ = ["SCHEMA_VERSION", "to_plain", "dumps", "load_schema", "validate"]

SCHEMA_VERSION = "1.0"


def to_plain(obj):
    """Convert reports, dataclasses and numpy values into JSON-ready builtins."""
    if hasattr(obj, "to_dict") and not isinstance(obj, type):
        return to_plain(obj.to_dict())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return to_plain(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _number(v: float) -> str:
    if not math.isfinite(v):
        return "null"
    s = "%.17g" % v
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def _emit(obj, indent: int, depth: int, out: list):
    pad = " " * (indent * (depth + 1))
    end = " " * (indent * depth)
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(_number(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.append(f"{pad}{json.dumps(str(k), ensure_ascii=False)}: ")
            _emit(v, indent, depth + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, list):
        if not obj:
            out.append("[]")
            return
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) or v is None for v in obj):
            parts = []
            for v in obj:
                sub: list = []
                _emit(v, indent, depth + 1, sub)
                parts.append("".join(sub))
            out.append("[" + ", ".join(parts) + "]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad)
            _emit(v, indent, depth + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON text with every float at 17 significant digits and NaN/inf as null."""
    out: list = []
    _emit(to_plain(obj), indent, 0, out)
    return "".join(out) + "\n"


def load_schema(name: str) -> dict:
    with resources.files("entroscope.schemas").joinpath(f"{name}.schema.json").open() as fh:
        return json.load(fh)


def validate(doc: dict, name: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match the named schema."""
    import jsonschema

    jsonschema.validate(doc, load_schema(name))
