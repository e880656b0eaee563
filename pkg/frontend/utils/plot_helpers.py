# frontend/utils/plot_helpers.py
# Plotly figures for stream reports (dark theme, one trace per camera)

import math

import numpy as np
import pandas as pd
import plotly.graph_objects as go

CAMERA_COLORS = ["#39D98A", "#4EA8FF", "#F5503C", "#F2C94C", "#BB6BD9", "#56CCF2"]
LAYOUT = dict(template="plotly_dark", plot_bgcolor="rgba(8,10,15,1)", paper_bgcolor="rgba(8,10,15,1)",
              hovermode="x unified", margin=dict(t=80, b=60, l=60, r=40))


def _color(i):
    return CAMERA_COLORS[i % len(CAMERA_COLORS)]


def _finite(series):
    return series.replace([np.inf, -np.inf], np.nan)


# ---------------------------
# PSNR per camera
# ---------------------------
def psnr_per_frame(metrics, title="Masked PSNR per frame", smoothing=False):
    df = metrics[metrics["gt_available"]]
    if df.empty:
        raise ValueError("No frames with ground truth to plot.")

    fig = go.Figure()
    for i, (cam, g) in enumerate(df.groupby("camera", sort=False)):
        y = _finite(g["psnr"])
        if smoothing and len(g) >= 5:
            y = y.rolling(window=3, min_periods=1, center=True).mean()
        fig.add_trace(go.Scatter(x=g["t"], y=y, mode="lines+markers", name=cam,
                                 line=dict(color=_color(i), width=2.4), marker=dict(size=5),
                                 hovertemplate="t=%{x}<br>%{y:.2f} dB<extra>" + cam + "</extra>"))
        sat = g[g["saturated"]]
        if not sat.empty:
            top = y.max() if y.notna().any() else 100.0
            fig.add_trace(go.Scatter(x=sat["t"], y=[top] * len(sat), mode="markers", showlegend=False,
                                     marker=dict(symbol="star", size=10, color=_color(i)), name=f"{cam} saturated"))

    fig.update_layout(title=title, xaxis=dict(title="Frame t"), yaxis=dict(title="PSNR (dB)"), height=480, **LAYOUT)
    return fig


# ---------------------------
# Coverage curve
# ---------------------------
def coverage_curve(coverage, title="Canonical coverage", line_color="#39D98A", area_fill="rgba(57,217,138,0.10)"):
    if coverage.empty:
        raise ValueError("Coverage table is empty.")
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=coverage["t"], y=coverage["coverage"], mode="lines", fill="tozeroy",
                             line=dict(color=line_color, width=2.6), fillcolor=area_fill, name="accumulated",
                             hovertemplate="t=%{x}<br>%{y:.3f}<extra></extra>"))
    if "state_coverage" in coverage.columns and not np.allclose(coverage["state_coverage"], coverage["coverage"]):
        fig.add_trace(go.Scatter(x=coverage["t"], y=coverage["state_coverage"], mode="lines", name="window",
                                 line=dict(color="#4EA8FF", width=1.8, dash="dot")))
    fig.update_layout(title=title, xaxis=dict(title="Frame t"), yaxis=dict(title="Fraction of vertices", range=[0, 1.02]),
                      height=380, **LAYOUT)
    return fig


# ---------------------------
# High-frequency energy
# ---------------------------
def high_freq_per_frame(metrics, title="High-frequency energy (Laplacian)"):
    fig = go.Figure()
    for i, (cam, g) in enumerate(metrics.groupby("camera", sort=False)):
        fig.add_trace(go.Bar(x=g["t"], y=g["high_freq"], name=cam, marker_color=_color(i)))
    fig.update_layout(title=title, barmode="group", xaxis=dict(title="Frame t"), yaxis=dict(title="Mean squared response"),
                      height=380, **LAYOUT)
    return fig


# ---------------------------
# Temporal statistics
# ---------------------------
def temporal_bars(temporal, title="Mean frame-to-frame change"):
    if temporal.empty:
        raise ValueError("No temporal statistics.")
    fig = go.Figure()
    fig.add_trace(go.Bar(x=temporal["camera"], y=temporal["frame_diff"], name="rendered", marker_color="#39D98A"))
    if "gt_frame_diff" in temporal.columns:
        fig.add_trace(go.Bar(x=temporal["camera"], y=temporal["gt_frame_diff"], name="ground truth",
                             marker_color="rgba(180,180,200,0.9)"))
    cols = [c for c in ("frame_diff", "gt_frame_diff") if c in temporal.columns]
    values = temporal[cols].to_numpy(dtype=float)
    vmax = float(np.nanmax(values)) if np.isfinite(values).any() else 1.0
    if math.isclose(vmax, 0.0):
        vmax = 1.0
    fig.update_layout(title=title, barmode="group", yaxis=dict(title="Mean |difference|", range=[0, vmax * 1.3]),
                      height=360, **LAYOUT)
    return fig


def psnr_table(metrics):
    """Wide t x camera PSNR table for display/download."""
    return metrics.pivot_table(values="psnr", index="t", columns="camera", aggfunc="first").sort_index()
