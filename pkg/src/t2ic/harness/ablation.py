"""Loss-combination ablation: one training run per row, same seed, one table."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

from .config import RunConfig, apply_overrides
from .training import train

log = logging.getLogger(__name__)

TABLE_COLUMNS = ["row", "lambda1", "lambda2", "lambda3", "lambda4", "IS", "IS_std", "toy_FID",
                 "R_precision", "status"]

CONTRASTIVE_ROWS = [
    ("base", {"lambda2": "0", "lambda3": "0", "lambda4": "0"}),
    ("+F2F", {"lambda2": "0", "lambda3": "0.2", "lambda4": "0"}),
    ("+F2F+F2R", {"lambda2": "0.2", "lambda3": "0.2", "lambda4": "0"}),
]


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name) or "row"


def ablate(base: RunConfig, rows: list[tuple[str, dict[str, str]]], table_path=None) -> list[dict]:
    """Train each row from ``base`` with its overrides; a failed row is marked
    and the rest still run. Each row reports its final evaluation."""
    out = Path(base.out)
    table_path = Path(table_path) if table_path else out / "ablation.csv"
    table = []
    for i, (name, overrides) in enumerate(rows):
        row = {"row": name}
        try:
            cfg = apply_overrides(base, overrides).replace(out=str(out / f"{i:02d}_{_safe_name(name)}"))
            row.update(lambda1=cfg.lambda1, lambda2=cfg.lambda2, lambda3=cfg.lambda3, lambda4=cfg.lambda4)
            result = train(cfg)
            _, report = result.reports[-1]
            row.update(IS=report.is_mean, IS_std=report.is_std, toy_FID=report.fid,
                       R_precision=report.r_precision, status="ok")
        except Exception as exc:  # a failed row must not sink the table
            log.error("ablation row %s failed: %s", name, exc)
            row["status"] = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        table.append(row)
    table_path.parent.mkdir(parents=True, exist_ok=True)
    with open(table_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return table
