# frontend/utils/insight_helpers.py
import numpy as np
import pandas as pd

MILESTONES = (0.5, 0.9, 0.95)


def coverage_milestones(coverage, levels=MILESTONES):
    """First frame at which canonical coverage reaches each level (None if never)."""
    out = {}
    for level in levels:
        hit = coverage.loc[coverage["coverage"] >= level, "t"]
        out[level] = int(hit.iloc[0]) if not hit.empty else None
    return out


def compute_insights(metrics, coverage):
    scored = metrics[metrics["gt_available"]]
    finite = scored[np.isfinite(scored["psnr"])]

    if finite.empty:
        return {
            "best": (float("nan"), None, None),
            "worst": (float("nan"), None, None),
            "mean_psnr": {},
            "saturated": int(scored["saturated"].sum()) if not scored.empty else 0,
            "absent": int((~metrics["gt_available"]).sum()),
            "final_coverage": float(coverage["coverage"].iloc[-1]) if not coverage.empty else 0.0,
            "milestones": coverage_milestones(coverage),
            "trend": "N/A",
        }

    best = finite.loc[finite["psnr"].idxmax()]
    worst = finite.loc[finite["psnr"].idxmin()]
    mean_psnr = {cam: float(g["psnr"].mean()) for cam, g in finite.groupby("camera")}

    # first vs last quarter of the stream, averaged over cameras
    per_t = finite.groupby("t")["psnr"].mean()
    if len(per_t) >= 4:
        q = max(1, len(per_t) // 4)
        trend = "Up" if per_t.iloc[-q:].mean() > per_t.iloc[:q].mean() else "Down"
    else:
        trend = "N/A"

    return {
        "best": (float(best["psnr"]), int(best["t"]), str(best["camera"])),
        "worst": (float(worst["psnr"]), int(worst["t"]), str(worst["camera"])),
        "mean_psnr": mean_psnr,
        "saturated": int(scored["saturated"].sum()),
        "absent": int((~metrics["gt_available"]).sum()),
        "final_coverage": float(coverage["coverage"].iloc[-1]) if not coverage.empty else 0.0,
        "milestones": coverage_milestones(coverage),
        "trend": trend,
    }


def summary_rows(insights):
    rows = [["Final coverage", f"{insights['final_coverage']:.3f}"]]
    for cam, v in insights["mean_psnr"].items():
        rows.append([f"Mean PSNR ({cam})", f"{v:.2f} dB"])
    b, w = insights["best"], insights["worst"]
    if b[1] is not None:
        rows.append(["Best frame", f"t={b[1]} {b[2]}: {b[0]:.2f} dB"])
        rows.append(["Worst frame", f"t={w[1]} {w[2]}: {w[0]:.2f} dB"])
    for level, t in insights["milestones"].items():
        rows.append([f"Coverage >= {level:.2f}", "never" if t is None else f"t={t}"])
    rows.append(["Saturated frames", str(insights["saturated"])])
    rows.append(["Frames without GT", str(insights["absent"])])
    return rows


def summary_frame(insights):
    return pd.DataFrame(summary_rows(insights), columns=["Metric", "Value"])
