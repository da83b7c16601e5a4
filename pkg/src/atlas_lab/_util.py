"""Internal helpers: thread-count resolution and fixed-precision serialization."""

import math
import os

import numpy as np

# Floats are printed with 17 significant digits in JSON (lossless round-trip)
# and 10 in CSV.
JSON_FLOAT_FMT = ".17g"
CSV_FLOAT_FMT = ".10g"


def resolve_threads(explicit=None):
    """Worker cap: explicit argument, else ATLAS_LAB_THREADS, else cpu count.

    Thread count never changes results anywhere in the package; it only caps
    parallel block reduction.
    """
    if explicit is not None:
        n = int(explicit)
    else:
        env = os.environ.get("ATLAS_LAB_THREADS", "")
        if env:
            n = int(env)
        else:
            n = min(os.cpu_count() or 1, 8)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    return n


def fmt_csv(x):
    if isinstance(x, (float, np.floating)):
        return format(float(x), CSV_FLOAT_FMT)
    return str(x)


def write_csv(path, header, rows):
    """Write rows of mixed scalars with the fixed CSV conventions.

    Comma separator, '.' decimal, LF line endings, UTF-8, 10 significant
    digits for floats.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt_csv(x) for x in row) + "\n")


def _json_fragments(obj, out):
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            out.append('"nan"')
        elif math.isinf(x):
            out.append('"inf"' if x > 0 else '"-inf"')
        else:
            out.append(format(x, JSON_FLOAT_FMT))
    elif isinstance(obj, str):
        out.append(
            '"' + obj.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'
        )
    elif isinstance(obj, np.ndarray):
        _json_fragments(obj.tolist(), out)
    elif isinstance(obj, dict):
        out.append("{")
        for j, (k, v) in enumerate(obj.items()):
            if j:
                out.append(", ")
            _json_fragments(str(k), out)
            out.append(": ")
            _json_fragments(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for j, v in enumerate(obj):
            if j:
                out.append(", ")
            _json_fragments(v, out)
        out.append("]")
    else:
        raise TypeError(f"not JSON-serializable: {type(obj)!r}")
    return out


def dumps_json(obj):
    """JSON text with floats at 17 significant digits (stdlib json cannot pin this)."""
    return "".join(_json_fragments(obj, []))


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_json(obj))
        f.write("\n")
