"""
CSV tables and the hash manifest of a replication bundle.

All floats are written with 17 significant digits so that re-reading a table
reproduces the in-memory values, and nothing time-dependent is ever written:
two runs with the same configuration give byte-identical bundles.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from econometrics import RegressionResult, stars

FLOAT_FORMAT = "%.17g"
MANIFEST = "manifest.json"

SUMMARY_COLUMNS = ("Mean", "Median", "S.D.", "Min", "Max", "N")


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def summary_statistics(frame: pd.DataFrame, columns: Sequence[str],
                       labels: Optional[Mapping[str, str]] = None) -> pd.DataFrame:
    """Mean / Median / S.D. / Min / Max per variable"""
    labels = labels or {}
    rows = []
    for column in columns:
        values = frame[column].to_numpy(dtype=np.float64)
        rows.append({
            "variable": labels.get(column, column),
            "Mean": values.mean(),
            "Median": float(np.median(values)),
            "S.D.": values.std(ddof=1) if len(values) > 1 else 0.0,
            "Min": values.min(),
            "Max": values.max(),
            "N": len(values),
        })
    return pd.DataFrame(rows, columns=["variable", *SUMMARY_COLUMNS])


def category_shares(frame: pd.DataFrame, columns: Sequence[str]) -> pd.DataFrame:
    rows = []
    for column in columns:
        counts = frame[column].astype(str).value_counts(sort=False).sort_index()
        for level, count in counts.items():
            rows.append({"variable": column, "level": level, "share": count / len(frame), "count": int(count)})
    return pd.DataFrame(rows, columns=["variable", "level", "share", "count"])


def regression_table(result: RegressionResult, model: Optional[str] = None) -> pd.DataFrame:
    """Coefficient rows followed by footer rows (adj_r2, f_stat, f_pvalue, n) in the coefficient column"""
    body = result.to_frame()
    footer = pd.DataFrame({"variable": list(result.footer()), "coefficient": list(result.footer().values())})
    table = pd.concat([body, footer], ignore_index=True)
    table["stars"] = table["stars"].fillna("")
    if model is not None:
        table.insert(0, "model", model)
    return table


def stack_tables(tables: Iterable[pd.DataFrame]) -> pd.DataFrame:
    return pd.concat(list(tables), ignore_index=True)


def band_row(label: str, feature: str, result: RegressionResult, name: str, **extra) -> Dict[str, object]:
    """One coefficient with its 90% band, for the conventional vs learned comparison"""
    i = result.names.index(name)
    p = float(result.p_values[i]) if result.p_values is not None else np.nan
    return {
        **extra,
        "approach": label,
        "feature": feature,
        "coefficient": float(result.coefficients[i]),
        "lower90": float(result.ci_lower[i]) if result.ci_lower is not None else np.nan,
        "upper90": float(result.ci_upper[i]) if result.ci_upper is not None else np.nan,
        "se": float(result.se[i]) if result.se is not None else np.nan,
        "p_value": p,
        "stars": stars(p) if np.isfinite(p) else "",
    }


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class ReportBundle:
    """Files under ``root`` plus the status of every analysis"""
    root: Path
    statuses: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)

    @classmethod
    def open(cls, root: Union[str, Path], analyses: Sequence[str]) -> "ReportBundle":
        """Resume statuses from an existing manifest; unknown analyses start as 'pending'"""
        root = Path(root)
        statuses = {name: "pending" for name in analyses}
        manifest = root / MANIFEST
        if manifest.exists():
            previous = json.loads(manifest.read_text(encoding="utf-8")).get("analyses", {})
            statuses.update({k: v for k, v in previous.items() if k in statuses})
        return cls(root, statuses)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def set_status(self, analysis: str, status: str) -> None:
        self.statuses[analysis] = status

    def files(self) -> List[Dict[str, object]]:
        entries = []
        for path in sorted(p for p in self.root.rglob("*") if p.is_file() and p.name != MANIFEST):
            rel = path.relative_to(self.root).as_posix()
            entries.append({"path": rel, "sha256": file_sha256(path), "bytes": path.stat().st_size})
        entries.sort(key=lambda e: e["path"])
        return entries

    def write_manifest(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {
            "files": self.files(),
            "analyses": dict(sorted(self.statuses.items())),
        }
        path = self.root / MANIFEST
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return path


def read_manifest(root: Union[str, Path]) -> Dict[str, object]:
    return json.loads((Path(root) / MANIFEST).read_text(encoding="utf-8"))
