"""Text artifacts: per-cell map CSVs, PGM heatmaps, metric reports and
key=value config files.

Map CSV (one row per cell, row-major)::

    cell_row,cell_col,H,is_foreground          # entropy map
    cell_row,cell_col,sigma,is_foreground      # sigma field

Report CSV (one row per probe sample, sorted by sample id)::

    sample_id,n_fg,n_bg,fg_ratio,m_hat,weight_distance,rho,status

Empty fields mean "not defined" (e.g. ``rho`` for a sample whose union of
knowledge points is empty).  The summary file holds ``key=value`` lines:
``network``, ``samples``, ``mean_n_fg``, ``mean_n_bg``, ``lambda``,
``d_mean``, ``d_var``, ``mean_rho``, ``count.<reason>`` for every exclusion
counter, then ``config.<knob>`` for every configuration value.  Reals are
written as the shortest string that reads back to the same double, so
files are exact and byte-stable.
"""
from __future__ import annotations

import csv
import io
import os
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .quantify import EntropyMap, SigmaField

REPORT_FIELDS = ("sample_id", "n_fg", "n_bg", "fg_ratio", "m_hat", "weight_distance", "rho", "status")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return "x".join(fmt(x) for x in v)
    return str(v)


def _atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


# -- per-cell maps -------------------------------------------------------------------
def map_csv(values: np.ndarray, foreground: np.ndarray, column: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell_row", "cell_col", column, "is_foreground"])
    for (r, c), v in np.ndenumerate(values):
        w.writerow([r, c, fmt(float(v)), int(bool(foreground[r, c]))])
    return buf.getvalue()


def write_entropy_csv(path, emap: EntropyMap) -> Path:
    return _atomic_write(path, map_csv(emap.H, emap.foreground, "H"))


def write_sigma_csv(path, field: SigmaField, foreground) -> Path:
    return _atomic_write(path, map_csv(field.sigma, np.asarray(foreground, bool), "sigma"))


def read_map_csv(path) -> tuple:
    """Return ``(values, foreground, column)`` from a map CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    if head[:2] != ["cell_row", "cell_col"] or head[3] != "is_foreground":
        raise ValueError(f"{path}: not a map CSV")
    h = max(int(r[0]) for r in body) + 1
    w = max(int(r[1]) for r in body) + 1
    vals, fg = np.zeros((h, w)), np.zeros((h, w), bool)
    for r in body:
        vals[int(r[0]), int(r[1])] = float(r[2])
        fg[int(r[0]), int(r[1])] = r[3] == "1"
    return vals, fg, head[2]


def read_entropy_csv(path, sample_id: int = 0, tap: Optional[str] = None) -> EntropyMap:
    vals, fg, col = read_map_csv(path)
    if col != "H":
        raise ValueError(f"{path}: holds {col}, not H")
    return EntropyMap(vals, fg, sample_id, tap)


# -- heatmaps ------------------------------------------------------------------------
def heatmap_levels(H: np.ndarray) -> np.ndarray:
    """Gray levels ``round(255 (H_max - H) / (H_max - H_min))``; darker = less discarded."""
    H = np.asarray(H, dtype=np.float64)
    lo, hi = H.min(), H.max()
    if hi == lo:
        return np.zeros(H.shape, dtype=int)
    return np.rint(255.0 * (hi - H) / (hi - lo)).astype(int)


def write_pgm(path, emap: EntropyMap) -> Path:
    g = heatmap_levels(emap.H)
    h, w = g.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in g]
    return _atomic_write(path, "\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    px = np.array(tokens[4:4 + w * h], dtype=int)
    if px.size != w * h or px.max(initial=0) > maxval:
        raise ValueError(f"{path}: truncated or out-of-range PGM")
    return px.reshape(h, w)


# -- reports -------------------------------------------------------------------------
def report_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in sorted(report.rows, key=lambda r: r.sample_id):
        w.writerow([fmt(r.sample_id), fmt(r.n_fg), fmt(r.n_bg), fmt(r.fg_ratio), fmt(r.m_hat),
                    fmt(r.weight_distance), fmt(r.rho), r.status])
    return buf.getvalue()


def report_summary(report) -> str:
    items = [("network", report.network), ("samples", len(report.rows)),
             ("mean_n_fg", report.mean_n_fg), ("mean_n_bg", report.mean_n_bg), ("lambda", report.lam),
             ("d_mean", report.d_mean), ("d_var", report.d_var), ("mean_rho", report.mean_rho)]
    items += [(f"count.{k}", v) for k, v in sorted(report.counts.items())]
    items += [(f"config.{k}", v) for k, v in sorted(report.config.items())]
    return "".join(f"{k}={fmt(v)}\n" for k, v in items)


def write_report(report, csv_path, summary_path) -> tuple:
    if not report.rows:
        raise UndefinedMetricError("empty probe set: nothing to report")
    text_csv, text_sum = report_csv(report), report_summary(report)
    return _atomic_write(csv_path, text_csv), _atomic_write(summary_path, text_sum)


def read_summary(path) -> dict:
    return parse_kv(Path(path).read_text())


# -- key=value config ----------------------------------------------------------------
def parse_kv(text: str) -> dict:
    """Parse ``key=value`` lines.

    ``#`` starts a comment, blank lines are skipped, and a ``[section]`` line
    prefixes the keys that follow with ``section.`` until the next header.
    """
    out, prefix = {}, ""
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            prefix = f"{name}." if name else ""
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[prefix + k] = v
    return out


def dump_kv(values: Mapping) -> str:
    return "".join(f"{k}={fmt(v)}\n" for k, v in values.items())
