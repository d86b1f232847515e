# artifacts.py

"""
Run directories and the files written into them: CSV tables (pandas), JSON
summaries, the manifest and a gnuplot script. Nothing here renders images.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

from errors import NumericalFailure

logger = logging.getLogger(__name__)

TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "PyYAML", "mpmath", "python-dotenv")


def jsonable(value: Any) -> Any:
    """Converts numpy scalars/arrays and non-finite floats into plain JSON values."""
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, Path):
        return str(value)
    return value


def hash_payload(payload: Mapping[str, Any]) -> str:
    data = json.dumps(jsonable(payload), sort_keys=True).encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def package_versions() -> dict:
    out = {}
    for name in TRACKED_PACKAGES:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = None
    return out


@dataclass
class PlotSpec:
    """One gnuplot panel: columns of a CSV plotted against a time-like column."""

    csv: str
    x: str
    ys: list
    title: str
    logscale_y: bool = False


@dataclass
class RunDirectory:
    path: Path
    written: list = field(default_factory=list)

    def __post_init__(self):
        self.path = Path(self.path)
        self.path.mkdir(parents=True, exist_ok=True)

    def _record(self, name: str) -> Path:
        self.written.append(name)
        return self.path / name

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        # fixed float format keeps repeated runs byte-identical
        target = self._record(name)
        frame.to_csv(target, index=False, float_format="%.17g")
        logger.debug("wrote %s (%d rows)", target, len(frame))
        return target

    def write_json(self, name: str, payload: Mapping[str, Any]) -> Path:
        target = self._record(name)
        target.write_text(json.dumps(jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return target

    def write_manifest(self, config: Mapping[str, Any], seed: int, kind: str) -> Path:
        return self.write_json("manifest.json", {
            "kind": kind,
            "seed": seed,
            "config": config,
            "config_hash_sha256": hash_payload(config),
            "packages": package_versions(),
            "files": sorted(set(self.written)),
        })

    def write_plots(self, specs: list[PlotSpec]) -> Path:
        lines = ['set datafile separator ","', "set key autotitle columnhead", "set grid", ""]
        for spec in specs:
            lines.append(f'set title "{spec.title}"')
            lines.append(f'set xlabel "{spec.x}"')
            lines.append("set logscale y" if spec.logscale_y else "unset logscale y")
            parts = [f"'{spec.csv}' using \"{spec.x}\":\"{y}\" with lines title \"{y}\"" for y in spec.ys]
            lines.append("plot " + ", \\\n     ".join(parts))
            lines.append("pause -1")
            lines.append("")
        target = self._record("plots.gp")
        target.write_text("\n".join(lines), encoding="utf-8")
        return target

    def write_diagnostic(self, error: NumericalFailure, stage: str) -> Path:
        """diagnostic.json for a failed run: error class, message and any attached location."""
        payload = {"stage": stage, "error": type(error).__name__, "message": str(error)}
        for attr in ("n", "t", "offending"):
            if getattr(error, attr, None) is not None:
                payload[attr] = getattr(error, attr)
        logger.error("%s failed in %s: %s", stage, type(error).__name__, error)
        return self.write_json("diagnostic.json", payload)
