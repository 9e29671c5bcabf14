"""JSON helpers shared by dataset, certificate and manifest writers.

Floats are emitted with 17 significant digits (full round-trip precision) and
infinities are written as the literal string "inf" so documents stay valid
JSON and still distinguish an infeasible cost from every finite value.
The writer is hand-rolled because the stdlib encoder offers no hook for
float formatting; the reader is plain json.
"""

from __future__ import annotations

import json
import math


def decode_float(v) -> float:
    if v == "inf":
        return math.inf
    if v == "-inf":
        return -math.inf
    return float(v)


def float_repr(v: float) -> str:
    if math.isinf(v):
        return '"inf"' if v > 0 else '"-inf"'
    if math.isnan(v):
        raise ValueError("NaN has no serialized form")
    text = f"{v:.17g}"
    if not any(c in text for c in ".eE"):
        text += ".0"  # keep float typing through a JSON round trip
    return text


def _write(obj, out, indent, level):
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end = "" if indent is None else "\n" + " " * (indent * level)
    sep = "," if indent is None else ","
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(float_repr(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"object keys must be strings, got {type(k)}")
            out.append(f"{pad}{json.dumps(k)}: ")
            _write(v, out, indent, level + 1)
            out.append(sep)
        out[-1] = end  # replace trailing comma
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        if not len(obj):
            out.append("[]")
            return
        out.append("[")
        for v in obj:
            out.append(pad)
            _write(v, out, indent, level + 1)
            out.append(sep)
        out[-1] = end
        out.append("]")
    elif hasattr(obj, "tolist"):  # numpy arrays and scalars
        _write(obj.tolist(), out, indent, level)
    elif hasattr(obj, "item"):
        _write(obj.item(), out, indent, level)
    else:
        raise TypeError(f"cannot serialize {type(obj)}")


def dumps(obj, indent=None) -> str:
    """Serialize with %.17g floats and string-encoded infinities."""
    out: list[str] = []
    _write(obj, out, indent, 0)
    return "".join(out)


def loads(text: str):
    return json.loads(text)
