"""Deterministic JSON emission: sorted keys, floats at 17 significant
digits, so identical inputs produce byte-identical reports."""

from __future__ import annotations

import json
import re

_FLOAT = re.compile(r"-?\d+\.\d+(?:[eE][+-]?\d+)?|-?\d+[eE][+-]?\d+")


def dumps(obj):
    def fallback(o):
        import numpy as np
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.integer):
            return int(o)
        raise TypeError(f"not JSON serializable: {type(o)}")

    text = json.dumps(obj, sort_keys=True, default=fallback,
                      separators=(",", ": "), indent=1)
    return _rewrite_floats(text)


def _rewrite_floats(text):
    """Normalize every non-string float literal to 17 significant digits."""
    out = []
    i = 0
    while i < len(text):
        if text[i] == '"':
            j = i + 1
            while j < len(text):
                if text[j] == "\\":
                    j += 2
                    continue
                if text[j] == '"':
                    break
                j += 1
            out.append(text[i:j + 1])
            i = j + 1
            continue
        j = text.find('"', i)
        if j == -1:
            j = len(text)
        out.append(_FLOAT.sub(lambda m: f"{float(m.group(0)):.17g}",
                              text[i:j]))
        i = j
    return "".join(out)
