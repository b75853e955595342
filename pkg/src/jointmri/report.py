"""Metric tables: per-slice CSV reports and method x rate comparison tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = "metrics/1"

# Full-scale reference values for the learned-pattern method. They come from
# ~1100 epochs on licensed brain scans and are never asserted at desk scale.
REFERENCE_ANCHORS = (
    ("semunet", 0.05, "PSNR_dB", 31.20),
    ("semunet", 0.05, "SSIM_pct", 93.16),
    ("semunet", 0.05, "DSC_pct", 72.45),
    ("semunet", 0.10, "PSNR_dB", 34.30),
    ("semunet", 0.10, "SSIM_pct", 96.47),
    ("semunet", 0.10, "DSC_pct", 75.08),
    ("semunet", 0.20, "PSNR_dB", 39.24),
    ("semunet", 0.20, "SSIM_pct", 98.56),
    ("semunet", 0.20, "DSC_pct", 76.79),
)

FOOTER_NOTES = (
    "DSC: mean over foreground classes present in prediction or truth; absent classes score 1.0 and are excluded",
    "PSNR: data_range 1.0, reconstructions clipped to [0,1], identical images reported as 99.0 dB",
    "SSIM: 7x7 uniform window, K1=0.01, K2=0.03, reported in percent",
)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def footer_lines(config_hash: str | None = None) -> list:
    lines = [f"# schema {SCHEMA_VERSION}"]
    if config_hash:
        lines.append(f"# config_hash {config_hash}")
    lines += [f"# note {n}" for n in FOOTER_NOTES]
    for method, rate, metric, value in REFERENCE_ANCHORS:
        lines.append(
            f"# reference {method} rate={rate:.2f} {metric}={value:.2f} full-scale value, not desk-reproducible"
        )
    return lines


@dataclass
class MetricsReport:
    method: str
    rate: float
    seed: int
    rows: list
    class_count: int
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def columns(self) -> list:
        return ["method", "rate", "seed", "subject", "slice", "psnr", "ssim", "dsc"] + [
            f"dsc_{c}" for c in range(self.class_count)
        ]

    def summary(self) -> dict:
        """Column means over slice rows."""
        out = {}
        for key in ["psnr", "ssim", "dsc"] + [f"dsc_{c}" for c in range(self.class_count)]:
            out[key] = float(np.mean([r[key] for r in self.rows])) if self.rows else math.nan
        return out

    @property
    def mean_psnr(self) -> float:
        return self.summary()["psnr"]

    @property
    def mean_ssim(self) -> float:
        return self.summary()["ssim"]

    @property
    def mean_dsc(self) -> float:
        return self.summary()["dsc"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        head = [self.method, f"{self.rate:.4f}", self.seed]
        for r in self.rows:
            w.writerow(head + [r["subject"], r["slice"]] + [_fmt(r[c]) for c in self.columns[5:]])
        s = self.summary()
        w.writerow(head + ["summary", "mean"] + [_fmt(s[c]) for c in self.columns[5:]])
        for line in footer_lines(self.config_hash):
            buf.write(line + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


def read_metrics_csv(path) -> tuple[list, dict]:
    """Parse a metrics.csv into (slice rows, summary row) with numeric fields as floats."""
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    reader = csv.DictReader(lines)
    rows, summary = [], None
    for rec in reader:
        for key in list(rec):
            if key == "psnr" or key == "ssim" or key.startswith("dsc") or key == "rate":
                rec[key] = float(rec[key])
        if rec["subject"] == "summary":
            summary = rec
        else:
            rows.append(rec)
    return rows, summary


# ---------------------------------------------------------------------------
# comparison


METRICS = ("psnr", "ssim", "dsc")


def comparison_table(results: list, methods: list, rates: list) -> list:
    """Aggregate per-run summaries into one row per (method, rate).

    ``results`` holds dicts with method, rate, seed, psnr, ssim, dsc. Each row
    gets ``best_<metric>`` flags; ties go to the method listed first.
    """
    table = []
    for rate in rates:
        block = []
        for method in methods:
            runs = [r for r in results if r["method"] == method and math.isclose(r["rate"], rate)]
            row = {"method": method, "rate": rate, "seeds": len(runs)}
            for m in METRICS:
                row[m] = float(np.mean([r[m] for r in runs])) if runs else math.nan
            block.append(row)
        for m in METRICS:
            values = [row[m] for row in block]
            best = None
            for i, v in enumerate(values):
                if not math.isnan(v) and (best is None or v > values[best]):
                    best = i
            for i, row in enumerate(block):
                row[f"best_{m}"] = int(i == best)
        table.extend(block)
    return table


def write_comparison_csv(table: list, path) -> Path:
    path = Path(path)
    cols = ["method", "rate", "seeds", "psnr", "ssim", "dsc", "best_psnr", "best_ssim", "best_dsc"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in table:
            w.writerow([f"{row['rate']:.4f}" if c == "rate" else _fmt(row[c]) for c in cols])
        for line in footer_lines():
            fh.write(line + "\n")
    return path
