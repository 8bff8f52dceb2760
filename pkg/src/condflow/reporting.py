from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import fmt


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x) or math.isinf(x):
            return str(x)
        return float(fmt(x))
    return obj


@dataclass
class CheckReport:
    """Outcome of one statistical check, serialisable to JSON."""

    name: str
    statistic: float
    threshold: float
    passed: bool
    n_common: int = 0
    n_copies: int = 0
    seeds: Sequence[int] = ()
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return _plain(d)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: statistic={self.statistic:.6g} threshold={self.threshold:.6g}"


def write_json(payload, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def mean_ci(samples, z: float = 1.96) -> tuple[float, float, float]:
    """Mean and normal-approximation confidence interval."""
    x = np.asarray(samples, float)
    m = float(np.mean(x))
    if x.size < 2:
        return m, m, m
    half = z * float(np.std(x, ddof=1)) / math.sqrt(x.size)
    return m, m - half, m + half


def studentized_mean(samples) -> float:
    x = np.asarray(samples, float)
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    m = float(np.mean(x))
    if sd == 0.0:
        return 0.0 if m == 0.0 else math.copysign(math.inf, m)
    return m / (sd / math.sqrt(x.size))
