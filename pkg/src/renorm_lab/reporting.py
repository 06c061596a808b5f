"""Deterministic CSV/JSON emission with stable schemas.

CSV bodies must be byte-identical across re-runs with the same seed, so all
floats are formatted with the shortest round-trip representation and no
timestamps ever enter a report file.  Every file carries a schema id.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = "renorm-lab.v1"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def write_csv(path: Path | str, header: Sequence[str],
              rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return float(x)
    raise TypeError(f"not JSON serializable: {type(x)}")


def write_json(path: Path | str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True,
                               default=_json_default) + "\n",
                    encoding="utf-8")
    return path


def summary_payload(experiment: str, config: dict, results: dict) -> dict:
    from . import __version__
    return {
        "schema": SCHEMA_VERSION,
        "experiment": experiment,
        "version": f"renorm-lab-{__version__}",
        "config": config,
        "results": results,
    }
