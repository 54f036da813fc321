"""Versioned text checkpoints with exact float round-tripping.

Layout::

    GATECRAFT-CKPT v1
    [section]
    key = i:3
    key = f:0.29999999999999999
    key = s:grid_nav
    key = b:true
    key = a:1 0.5 0.25

Floats are written with 17 significant digits, which round-trips IEEE
doubles exactly.
"""

from typing import Dict

import numpy as np

MAGIC = "GATECRAFT-CKPT v1"


class CheckpointError(ValueError):
    pass


def _fmt_float(x: float) -> str:
    return "%.17g" % float(x)


def _encode(value) -> str:
    if isinstance(value, bool):
        return "b:" + ("true" if value else "false")
    if isinstance(value, (int, np.integer)):
        return "i:%d" % int(value)
    if isinstance(value, (float, np.floating)):
        return "f:" + _fmt_float(value)
    if isinstance(value, str):
        if "\n" in value:
            raise CheckpointError("string values may not contain newlines")
        return "s:" + value
    arr = np.asarray(value, dtype=np.float64).ravel()
    return "a:" + " ".join(_fmt_float(v) for v in arr)


def _decode(text: str):
    tag, _, body = text.partition(":")
    if tag == "i":
        return int(body)
    if tag == "f":
        return float(body)
    if tag == "s":
        return body
    if tag == "b":
        return body == "true"
    if tag == "a":
        return np.array([float(t) for t in body.split()] , dtype=np.float64)
    raise CheckpointError("unknown value tag %r" % tag)


def dump_sections(sections: Dict[str, Dict[str, object]]) -> str:
    lines = [MAGIC]
    for name, kv in sections.items():
        lines.append("[%s]" % name)
        for key, value in kv.items():
            lines.append("%s = %s" % (key, _encode(value)))
    return "\n".join(lines) + "\n"


def parse_sections(text: str) -> Dict[str, Dict[str, object]]:
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError("missing checkpoint magic %r" % MAGIC)
    sections: Dict[str, Dict[str, object]] = {}
    current = None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = {}
        else:
            if current is None:
                raise CheckpointError("key outside any section")
            key, _, raw = line.partition(" = ")
            sections[current][key] = _decode(raw)
    return sections


def save_checkpoint(path: str, sections: Dict[str, Dict[str, object]]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_sections(sections))


def load_checkpoint(path: str) -> Dict[str, Dict[str, object]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_sections(fh.read())
