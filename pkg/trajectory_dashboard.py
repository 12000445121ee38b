import json

import numpy as np
import pandas as pd
import streamlit as st


def load_trajectory(file):
    """Read a trajectory CSV and derive growth columns for each recorded k."""
    df = pd.read_csv(file)
    if "t" not in df.columns or "conservation_drift" not in df.columns:
        raise ValueError("not a trajectory CSV: expected columns t, norm_k<k>..., conservation_drift")
    norm_columns = [column for column in df.columns if column.startswith("norm_k")]
    elapsed = (df["t"] - df["t"].iloc[0]).abs()
    df["bracket"] = np.sqrt(1.0 + elapsed ** 2)
    for column in norm_columns:
        df[f"{column}_ratio"] = df[column] / df[column].iloc[0]
    return df, norm_columns


def norm_summary(df, norm_columns):
    rows = []
    for column in norm_columns:
        series = df[column]
        rows.append({
            "k": column[len("norm_k"):],
            "Initial": series.iloc[0],
            "Final": series.iloc[-1],
            "Max": series.max(),
            "Growth Ratio": series.max() / series.iloc[0],
        })
    return pd.DataFrame(rows)


def local_exponents(df, column, windows=8):
    """Slope of log norm against log<t-s> on consecutive windows."""
    edges = np.linspace(0, len(df) - 1, windows + 1).astype(int)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        chunk = df.iloc[lo:hi + 1]
        x = np.log(chunk["bracket"].to_numpy())
        y = np.log(chunk[column].to_numpy())
        if len(chunk) < 3 or np.ptp(x) == 0:
            continue
        slope = np.polyfit(x, y, 1)[0]
        rows.append({"t_start": chunk["t"].iloc[0], "t_end": chunk["t"].iloc[-1], "local exponent": slope})
    return pd.DataFrame(rows)


def main():
    st.set_page_config(
        page_title="Sobolev Growth Browser",
        page_icon="📈",
        layout="wide"
    )
    st.title("Sobolev Norm Growth Browser")
    st.write("Upload the trajectory CSV and, optionally, the fit JSON written by `main.py growth`.")

    trajectory_file = st.file_uploader("Upload trajectory CSV", type=["csv"])
    fit_file = st.file_uploader("Upload fit JSON", type=["json"])

    if trajectory_file is None:
        st.info("No trajectory loaded yet.")
        return

    try:
        df, norm_columns = load_trajectory(trajectory_file)
    except ValueError as e:
        st.error(str(e))
        return

    tab1, tab2, tab3 = st.tabs(["Overview", "Local Exponents", "Fit Report"])

    with tab1:
        st.header("Trajectory")
        col1, col2, col3 = st.columns(3)
        with col1:
            st.metric("Samples", len(df))
        with col2:
            st.metric("Time Span", f"{df['t'].iloc[0]:g} .. {df['t'].iloc[-1]:g}")
        with col3:
            st.metric("Max Conservation Drift", f"{df['conservation_drift'].max():.2e}")

        st.subheader("Norm Summary")
        st.dataframe(norm_summary(df, norm_columns), hide_index=True)
        st.dataframe(df, hide_index=True)

    with tab2:
        st.header("Local Growth Exponents")
        if norm_columns:
            column = st.selectbox("Norm", norm_columns, index=len(norm_columns) - 1)
            windows = st.slider("Windows", min_value=2, max_value=32, value=8)
            exponents = local_exponents(df, column, windows)
            st.dataframe(
                exponents,
                column_config={"local exponent": st.column_config.NumberColumn("Local Exponent", format="%.4f")},
                hide_index=True
            )
            st.download_button(
                label="Download Local Exponents CSV",
                data=exponents.to_csv(index=False),
                file_name=f"local_exponents_{column}.csv",
                mime="text/csv"
            )

    with tab3:
        st.header("Fit Report")
        if fit_file is None:
            st.info("Upload a fit JSON to see the fitted exponents.")
        else:
            report = json.load(fit_file)
            fits = pd.DataFrame(report.get("fits", []))
            col1, col2 = st.columns(2)
            with col1:
                st.metric("Model", report.get("model", "?"))
            with col2:
                st.metric("Regime", report.get("regime", "?"))
            st.dataframe(fits, hide_index=True)
            violated = fits[fits["verdict"] == "violated"] if "verdict" in fits else fits.iloc[0:0]
            if not violated.empty:
                st.warning(f"{len(violated)} fit(s) exceed their bound by more than 3 standard errors.")
            st.download_button(
                label="Download Fit Table CSV",
                data=fits.to_csv(index=False),
                file_name="fit_table.csv",
                mime="text/csv"
            )


if __name__ == "__main__":
    main()
