# frontend/utils/report_loader.py
# Loads and validates a canonfuse eval report (metrics.tsv, coverage.tsv, meta.json).
import io
import json
from pathlib import Path

import pandas as pd

METRICS_FILE = "metrics.tsv"
COVERAGE_FILE = "coverage.tsv"
META_FILE = "meta.json"

METRIC_COLUMNS = {"t", "camera", "psnr", "saturated", "gt_available", "high_freq", "coverage"}
COVERAGE_COLUMNS = {"t", "coverage"}


def _read_tsv(src):
    if isinstance(src, pd.DataFrame):
        return src.copy()
    if hasattr(src, "read"):
        return pd.read_csv(io.BytesIO(src.read()), sep="\t")
    return pd.read_csv(src, sep="\t")


def validate_metrics(df):
    missing = METRIC_COLUMNS - set(df.columns)
    if missing:
        raise ValueError(f"metrics table is missing columns: {sorted(missing)}")
    df = df.copy()
    df["t"] = pd.to_numeric(df["t"], errors="coerce")
    df = df.dropna(subset=["t"])
    df["t"] = df["t"].astype(int)
    df["camera"] = df["camera"].astype(str)
    for col in ("psnr", "high_freq", "coverage", "frame_diff", "gt_frame_diff"):
        if col in df.columns:
            df[col] = pd.to_numeric(df[col], errors="coerce")
    for col in ("saturated", "gt_available"):
        df[col] = df[col].astype(str).str.lower().isin(["true", "1"])
    return df.sort_values(["camera", "t"]).reset_index(drop=True)


def validate_coverage(df):
    missing = COVERAGE_COLUMNS - set(df.columns)
    if missing:
        raise ValueError(f"coverage table is missing columns: {sorted(missing)}")
    df = df.copy()
    df["t"] = pd.to_numeric(df["t"], errors="coerce")
    df["coverage"] = pd.to_numeric(df["coverage"], errors="coerce")
    df = df.dropna(subset=["t", "coverage"])
    df["t"] = df["t"].astype(int)
    df = df.sort_values("t").reset_index(drop=True)
    if ((df["coverage"] < 0) | (df["coverage"] > 1)).any():
        raise ValueError("coverage values must lie in [0, 1]")
    return df


def load_report(metrics, coverage=None, meta=None):
    """Report dict from a report directory, or from metrics / coverage sources (paths, uploads, frames)."""
    report_dir = None
    if isinstance(metrics, (str, Path)) and Path(metrics).is_dir():
        report_dir = Path(metrics)
        metrics = report_dir / METRICS_FILE
        coverage = report_dir / COVERAGE_FILE
        meta_path = report_dir / META_FILE
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}

    m = validate_metrics(_read_tsv(metrics))
    if coverage is None:
        c = m.groupby("t", as_index=False)["coverage"].first()
    else:
        c = validate_coverage(_read_tsv(coverage))
    return {"metrics": m, "coverage": c, "meta": meta or {}, "dir": report_dir}


def temporal_table(metrics):
    cols = [c for c in ("frame_diff", "gt_frame_diff") if c in metrics.columns]
    if not cols:
        return pd.DataFrame(columns=["camera"])
    return metrics.groupby("camera", as_index=False)[cols].mean()


def progression_images(report_dir):
    """Sorted canonical progression previews written at each snapshot."""
    if report_dir is None:
        return []
    return sorted(Path(report_dir, "progression").glob("canonical_*.png"))


def frame_image(report_dir, camera, t):
    if report_dir is None:
        return None
    p = Path(report_dir, "frames", camera, f"frame_{int(t):04d}.png")
    return p if p.exists() else None
