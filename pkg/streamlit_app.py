"""
STREAMLIT DASHBOARD - Adaptation report browser
===============================================
Reads the CSV tables written by `affectctl sweep` / `affectctl bidirectional`
from a report directory and shows:

- trend plots of every metric against the adaptation weight (or reference offset)
- the OLS fits stored next to each table
- the raw summary and per-image tables

    streamlit run streamlit_app.py -- --dir out
"""

import sys
from pathlib import Path

import pandas as pd
import plotly.express as px
import streamlit as st

from eval_harness import PLOT_COLUMNS, build_figure, load_report_tables

st.set_page_config(
    page_title="Emotion Adaptation Report",
    page_icon="🎨",
    layout="wide",
    initial_sidebar_state="expanded",
)


def _default_dir() -> str:
    args = sys.argv[1:]
    if "--dir" in args and args.index("--dir") + 1 < len(args):
        return args[args.index("--dir") + 1]
    return "out"


@st.cache_data(ttl=60, show_spinner=False)
def load_tables(report_dir: str):
    return load_report_tables(report_dir)


@st.cache_data(ttl=60, show_spinner=False)
def load_companion(report_dir: str, stem: str, suffix: str) -> pd.DataFrame:
    path = Path(report_dir) / f"{stem}{suffix}.csv"
    return pd.read_csv(path) if path.exists() else pd.DataFrame()


def _x_column(table: pd.DataFrame) -> str:
    return "offset" if "offset" in table.columns else "weight"


with st.sidebar:
    st.header("⚙️ Report")
    report_dir = st.text_input("Report directory", value=_default_dir())
    if st.button("🗑️ Reload tables", use_container_width=True):
        st.cache_data.clear()
        st.rerun()

st.markdown("## 🎨 Emotion-regulating adaptation report")

if not Path(report_dir).is_dir():
    st.error(f"❌ {report_dir} is not a directory")
    st.stop()

tables = load_tables(report_dir)
if not tables:
    st.warning("⚠️ No sweep_*.csv or bidirectional_*.csv tables found")
    st.stop()

with st.sidebar:
    st.markdown("---")
    st.markdown("### 📊 Tables")
    for name, table in tables.items():
        failed = int(table["n_failed"].sum()) if "n_failed" in table.columns else 0
        if failed:
            st.warning(f"⚠️ {name}: {failed} failed job(s)")
        else:
            st.success(f"✅ {name}: {len(table)} rows")

st.plotly_chart(build_figure(tables), use_container_width=True)

tabs = st.tabs(list(tables))
for tab, (name, table) in zip(tabs, tables.items()):
    with tab:
        x_col = _x_column(table)
        embedder = table["quality_embedder"].iloc[0] if "quality_embedder" in table.columns else "n/a"
        col1, col2, col3 = st.columns(3)
        col1.metric("Images per row", int(table["n_images"].max()) if "n_images" in table.columns else 0)
        col2.metric("Rows", len(table))
        col3.metric("FID/KID embedder", embedder)

        metrics = [c for c in PLOT_COLUMNS if c in table.columns]
        chosen = st.multiselect("Metrics", metrics, default=metrics[:4], key=f"metrics_{name}")
        if chosen:
            long = table.melt(id_vars=[x_col], value_vars=chosen, var_name="metric", value_name="value")
            fig = px.line(long.sort_values(x_col), x=x_col, y="value", facet_col="metric", facet_col_wrap=4,
                          markers=True, template="plotly_white")
            fig.update_yaxes(matches=None)
            st.plotly_chart(fig, use_container_width=True)

        fits = load_companion(report_dir, name, "_fits")
        if not fits.empty:
            st.markdown("#### OLS fits")
            st.dataframe(fits, use_container_width=True)

        st.markdown("#### Summary")
        st.dataframe(table, use_container_width=True)
        per_image = load_companion(report_dir, name, "_images")
        if not per_image.empty:
            with st.expander(f"Per-image rows ({len(per_image)})"):
                st.dataframe(per_image, use_container_width=True)
