# frontend/pages/Stream_Report.py
import sys
from pathlib import Path
CURRENT_DIR = Path(__file__).resolve()
UTILS_DIR = CURRENT_DIR.parent.parent / "utils"
sys.path.append(str(UTILS_DIR))

import streamlit as st

from plot_helpers import psnr_per_frame, coverage_curve, high_freq_per_frame, temporal_bars, psnr_table
from insight_helpers import compute_insights, summary_frame
from report_loader import temporal_table, progression_images, frame_image
from Report_Generator import generate_pdf_report

st.set_page_config(page_title="CanonFuse – Stream Report", layout="wide")
st.title("Stream Report")

report = st.session_state.get("report")
if report is None:
    st.warning("⚠️ Please load an eval report from the sidebar on the Home page first.")
    st.stop()

metrics, coverage, meta = report["metrics"], report["coverage"], report.get("meta", {})
insights = compute_insights(metrics, coverage)

# Headline cards
cols = st.columns(4)
cols[0].metric("Final coverage", f"{insights['final_coverage']:.3f}")
best, worst = insights["best"], insights["worst"]
cols[1].metric("Best frame", "—" if best[1] is None else f"{best[0]:.2f} dB", None if best[1] is None else f"t={best[1]} {best[2]}")
cols[2].metric("Worst frame", "—" if worst[1] is None else f"{worst[0]:.2f} dB", None if worst[1] is None else f"t={worst[1]} {worst[2]}")
cols[3].metric("PSNR trend", insights["trend"])

with st.expander("Visualization Options", expanded=False):
    smoothing = st.checkbox("Smooth PSNR (3-pt rolling)", value=False)

st.subheader("Masked PSNR")
try:
    st.plotly_chart(psnr_per_frame(metrics, smoothing=smoothing), use_container_width=True)
except Exception as e:
    st.error(f"Chart rendering error: {e}")

st.markdown("---")
st.subheader("Canonical coverage")
try:
    st.plotly_chart(coverage_curve(coverage), use_container_width=True)
except Exception as e:
    st.error(f"Chart rendering error: {e}")

st.markdown("---")
c1, c2 = st.columns(2)
with c1:
    st.subheader("High-frequency energy")
    st.plotly_chart(high_freq_per_frame(metrics), use_container_width=True)
with c2:
    st.subheader("Temporal statistics")
    st.caption("Frame-difference statistics; not comparable to FVD.")
    try:
        st.plotly_chart(temporal_bars(temporal_table(metrics)), use_container_width=True)
    except Exception as e:
        st.info(f"No temporal statistics: {e}")

strip = progression_images(report.get("dir"))
if strip:
    st.markdown("---")
    st.subheader("Canonical progression")
    st.image([str(p) for p in strip], caption=[p.stem for p in strip], width=140)

if report.get("dir") is not None:
    st.markdown("---")
    st.subheader("Rendered frames")
    cam = st.selectbox("Camera", sorted(metrics["camera"].unique()))
    t = st.slider("Frame", int(metrics["t"].min()), int(metrics["t"].max()), int(metrics["t"].min()))
    img = frame_image(report["dir"], cam, t)
    if img is not None:
        st.image(str(img), width=256)
    else:
        st.info("Frame PNG not saved for this run.")

st.markdown("---")
st.subheader("Summary")
st.dataframe(summary_frame(insights), use_container_width=True)
with st.expander("PSNR table"):
    st.dataframe(psnr_table(metrics))

# PDF button
st.subheader("📄 Generate PDF Report")
if st.button("Generate PDF Report"):
    with st.spinner("Building PDF report..."):
        pdf_bytes = generate_pdf_report(report)
    st.download_button("Download Stream Report (PDF)", data=pdf_bytes, file_name="canonfuse_report.pdf", mime="application/pdf")

csv_bytes = metrics.to_csv(sep="\t", index=False).encode()
st.download_button("Download metrics.tsv", data=csv_bytes, file_name="metrics.tsv", mime="text/tab-separated-values")
