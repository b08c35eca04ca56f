"""Atomic file output and JSON helpers shared by the command line tools."""
from __future__ import annotations

import contextlib
import json
import math
import os
import tempfile
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary path next to ``path``; move it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text(path, text):
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="\n") as fh:
            fh.write(text)


def clean(obj):
    """Make ``obj`` JSON-safe: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps(obj):
    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


def load_schema(name):
    text = resources.files("towerdecay.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_document(doc, name):
    jsonschema.validate(clean(doc), load_schema(name))


def write_json(path, doc, schema=None):
    doc = clean(doc)
    if schema is not None:
        validate_document(doc, schema)
    write_text(path, dumps(doc))
