# frontend/pages/Novel_View.py

import streamlit as st
import requests

from utils.api_helpers import render_payload, decode_png

st.title("Novel View")

scene_dir = st.session_state.get("scene_dir")

if not scene_dir:
    st.warning("⚠️ Please set the scene directory in the sidebar on the Home page first.")
    st.stop()

API = st.secrets.get("API_BASE")

# User inputs
camera = st.selectbox("Camera", ["left", "back", "right", "front"])
frame = st.number_input("Frame", min_value=0, value=0, step=1)
mode = st.selectbox("Render mode", ["none", "deterministic", "probabilistic"])
state_path = st.text_input("Canonical snapshot (.cft, empty = no history)", value="")
params_path = st.text_input("Renderer parameters (.cft)", value="")
seed = st.number_input("Seed", min_value=0, value=0, step=1)
context_mode = st.selectbox("Context mode", ["features", "raw_rgb", "none"])

# -------------------------
# RENDER
# -------------------------
if st.button("Render"):

    payload = render_payload(scene_dir, camera, frame, mode, state_path, params_path, seed,
                             {"stream.context_mode": context_mode})

    try:
        with st.spinner("Rendering..."):
            r = requests.post(f"{API}/render/", json=payload, timeout=120)
            r.raise_for_status()

            out = r.json()
            st.image(decode_png(out["image_png"]), caption=f"{camera} t={frame} ({mode})", width=320, clamp=True)

            if out.get("saturated"):
                st.success("Masked PSNR: saturated (identical to ground truth)")
            elif out.get("psnr") is not None:
                st.metric("Masked PSNR", f"{out['psnr']:.2f} dB")
            else:
                st.info("No ground truth for this view.")

    except requests.exceptions.RequestException as ex:
        st.error(f"Request error: {ex}")
    except Exception as ex:
        st.error(f"Unexpected error: {ex}")
