import streamlit as st
import os
from utils.report_loader import load_report

st.set_page_config(page_title='CanonFuse', layout='wide')

# -------------------------
# GLOBAL SIDEBAR REPORT
# -------------------------
st.sidebar.header("📂 Eval Report (Global)")

report_dir = st.sidebar.text_input("Report directory (output of `canonfuse eval`)", value="")
uploaded_metrics = st.sidebar.file_uploader("…or upload metrics.tsv", type=["tsv", "txt"])
uploaded_coverage = st.sidebar.file_uploader("coverage.tsv (optional)", type=["tsv", "txt"])

if st.sidebar.button("Load report"):
    try:
        if report_dir and os.path.isdir(report_dir):
            report = load_report(report_dir)
        elif uploaded_metrics is not None:
            report = load_report(uploaded_metrics, uploaded_coverage)
        else:
            raise ValueError("Give a report directory or upload metrics.tsv")
        st.session_state["report"] = report
        st.sidebar.success(f"Loaded {len(report['metrics'])} frame rows.")
    except Exception as e:
        st.session_state["report"] = None
        st.sidebar.error(f"Validation error: {e}")

st.sidebar.text_input("Scene directory (for novel views)", key="scene_dir")

# -------------------------
# HOME PAGE UI
# -------------------------
st.title("🧍 CanonFuse – Dashboard")

col1, col2, col3 = st.columns(3)
with col1:
    st.markdown("### 📈 Stream Report")
    st.markdown("Masked PSNR per novel camera, coverage growth, temporal statistics.")

with col2:
    st.markdown("### 🎥 Novel View")
    st.markdown("Render a held-out view from a canonical snapshot through the API.")

with col3:
    st.markdown("### 📝 PDF Reports")
    st.markdown("Download a summary of the stream run.")

report = st.session_state.get("report")
if report is not None:
    meta = report.get("meta", {})
    st.info(f"Report loaded: {meta.get('frames', '?')} frames, render `{meta.get('render_mode', '?')}`, "
            f"context `{meta.get('context_mode', '?')}`")

st.write("Load a report from the sidebar **once**. All pages use the same report.")
