"""CSV output: one row per replicate and one summary row per cell."""
from __future__ import annotations

import csv
import math
import os

from .harness import CellResult, ReplicateResult

REPLICATE_COLUMNS = ("env_id", "design_id", "replicate", "ate_hat", "ci_lo", "ci_hi", "covered",
                     "true_ate")
SUMMARY_COLUMNS = ("env_id", "design_id", "mse", "rmse", "coverage", "n", "T", "R", "seed")


def _num(x: float) -> str:
    return repr(float(x))  # shortest round-trip form


def _open(path):
    try:
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def emit_csv(results, out_dir) -> tuple:
    """Write ``replicates.csv`` and ``summary.csv`` under ``out_dir``; returns both paths."""
    results = list(results)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc.strerror}") from exc
    rep_path = os.path.join(out_dir, "replicates.csv")
    sum_path = os.path.join(out_dir, "summary.csv")
    with _open(rep_path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPLICATE_COLUMNS)
        for cell in results:
            for r in cell.replicates:
                w.writerow([cell.env_id, cell.design_id, r.replicate, _num(r.ate_hat), _num(r.ci_lo),
                            _num(r.ci_hi), "true" if r.covered else "false", _num(cell.true_ate)])
    with _open(sum_path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for cell in results:
            w.writerow([cell.env_id, cell.design_id, _num(cell.mse), _num(cell.rmse),
                        _num(cell.coverage), cell.n, cell.T, cell.R, cell.seed])
    return rep_path, sum_path


def read_replicates(path) -> list:
    """Rebuild cells (without n, T, seed) from a replicate CSV."""
    cells: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["env_id"], row["design_id"])
            cell = cells.get(key)
            if cell is None:
                cell = cells[key] = CellResult(row["env_id"], row["design_id"], float(row["true_ate"]),
                                               0, 0, 0)
            ate = float(row["ate_hat"])
            cell.replicates.append(ReplicateResult(
                int(row["replicate"]), ate, float(row["ci_lo"]), float(row["ci_hi"]),
                row["covered"] == "true", None if math.isfinite(ate) else "error"))
    return list(cells.values())


def read_summary(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in ("mse", "rmse", "coverage"):
            row[k] = float(row[k])
        for k in ("n", "T", "R", "seed"):
            row[k] = int(row[k])
    return rows
