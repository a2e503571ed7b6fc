"""
Text codecs for run artifacts.
Handles conversion between toolkit objects and their file formats: the UTable
table file, path and ensemble CSVs, report JSON and ratio tables.
"""

import hashlib
import json
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from rwre_toolkit.models import AsymptoticRatioReport, EnvironmentModel, Path, PathEnsemble, UTable

UTABLE_MAGIC = "# rwre-utable"
UTABLE_VERSION = 1


def format_float(value: float) -> str:
    """Shortest round-tripping decimal form; stable across runs."""
    return repr(float(value))


def _canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def model_hash(model: EnvironmentModel) -> str:
    """
    Short content hash of a model.

    Args:
        model: validated environment model

    Returns:
        str: first 16 hex digits of the SHA-256 of the canonical JSON dump
    """
    payload = _canonical_json(model.model_dump(mode="json"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ----- UTable -----

def utable_to_string(table: UTable) -> str:
    """
    Convert a UTable to its versioned text layout.

    Layout: a magic/version line, key=value header lines (model_hash, seed, N,
    horizon, unit, grid), a blank line, then one comma-separated row of
    entries per shift n = 0..N.
    """
    header = [
        f"{UTABLE_MAGIC} v{UTABLE_VERSION}",
        f"model_hash={table.model_hash}",
        f"seed={table.seed}",
        f"N={table.N}",
        f"horizon={table.horizon}",
        f"unit={format_float(table.unit)}",
        f"grid=0..{table.z_max}",
        "",
    ]
    rows = [",".join(format_float(v) for v in row) for row in table.entries]
    return "\n".join(header + rows) + "\n"


def string_to_utable(text: str) -> UTable:
    """
    Parse a UTable text file.

    Raises:
        ValueError: If the header or rows are malformed
    """
    lines = text.splitlines()
    if not lines or not lines[0].startswith(UTABLE_MAGIC):
        raise ValueError("not a UTable file")
    version = lines[0][len(UTABLE_MAGIC):].strip()
    if version != f"v{UTABLE_VERSION}":
        raise ValueError(f"unsupported UTable version: {version}")
    try:
        blank = lines.index("")
    except ValueError:
        raise ValueError("UTable header is not terminated by a blank line")
    header: Dict[str, str] = {}
    for line in lines[1:blank]:
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"invalid header line: {line}")
        header[key.strip()] = value.strip()
    for key in ("model_hash", "seed", "N", "horizon", "unit", "grid"):
        if key not in header:
            raise ValueError(f"UTable header is missing {key}")
    N = int(header["N"])
    z_max = int(header["grid"].split("..")[1])
    rows = [line for line in lines[blank + 1:] if line]
    if len(rows) != N + 1:
        raise ValueError(f"expected {N + 1} rows, found {len(rows)}")
    entries = np.array([[float(v) for v in row.split(",")] for row in rows])
    if entries.shape[1] != z_max + 1:
        raise ValueError(f"expected {z_max + 1} columns, found {entries.shape[1]}")
    return UTable(
        N=N,
        horizon=int(header["horizon"]),
        unit=float(header["unit"]),
        entries=entries,
        model_hash=header["model_hash"],
        seed=int(header["seed"]),
    )


# ----- CSV -----

def table_to_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Comma-delimited table with a header row; floats use format_float."""
    out: List[str] = [",".join(columns)]
    for row in rows:
        out.append(",".join(format_float(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    return "\n".join(out) + "\n"


def path_to_csv(path: Path) -> str:
    """Columns k, S_k."""
    return table_to_csv(["k", "S_k"], enumerate(float(s) for s in path.partial_sums()))


def ensemble_to_csv(ensemble: PathEnsemble) -> str:
    """Columns sample_id, k, value (value is y + S_k)."""
    rows = (
        (i, k, float(v))
        for i in range(ensemble.n_samples)
        for k, v in enumerate(ensemble.positions[i])
    )
    return table_to_csv(["sample_id", "k", "value"], rows)


def ensemble_summary(ensemble: PathEnsemble, seeds: Dict[str, int]) -> Dict[str, Any]:
    summary: Dict[str, Any] = {
        "N": ensemble.horizon,
        "y": ensemble.y,
        "method": ensemble.method,
        "n_samples": ensemble.n_samples,
        "seeds": dict(seeds),
    }
    if ensemble.proposals:
        summary["proposals"] = ensemble.proposals
        summary["acceptance_rate"] = ensemble.n_samples / ensemble.proposals
    return summary


def ratio_report_to_csv(report: AsymptoticRatioReport) -> str:
    return table_to_csv(
        ["n", "exact", "predicted", "ratio"],
        ((r.n, r.exact, r.predicted, r.ratio) for r in report.rows),
    )


# ----- JSON -----

def _to_jsonable(value: Any) -> Any:
    if hasattr(value, "model_dump"):
        return _to_jsonable(value.model_dump(mode="json"))
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def report_to_json(report: Any) -> str:
    """Deterministic JSON (sorted keys, two-space indent)."""
    return json.dumps(_to_jsonable(report), sort_keys=True, indent=2) + "\n"
