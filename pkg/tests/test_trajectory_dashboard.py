import io

import numpy as np
import pandas as pd
import pytest

from trajectory_dashboard import load_trajectory, local_exponents, norm_summary


def trajectory_csv(times, norms):
    frame = pd.DataFrame({"t": times, "norm_k1": norms, "conservation_drift": np.zeros(len(times))})
    return io.StringIO(frame.to_csv(index=False))


def test_load_trajectory_adds_growth_columns():
    times = np.linspace(0.0, 10.0, 11)
    df, columns = load_trajectory(trajectory_csv(times, 2.0 * np.sqrt(1.0 + times ** 2)))
    assert columns == ["norm_k1"]
    assert df["bracket"].iloc[-1] == pytest.approx(np.sqrt(101.0))
    assert np.allclose(df["norm_k1_ratio"], df["bracket"])


def test_load_trajectory_rejects_other_csv():
    with pytest.raises(ValueError):
        load_trajectory(io.StringIO("index,eigenvalue\n0,1.0\n"))


def test_norm_summary_and_local_exponents():
    times = np.linspace(0.0, 1000.0, 801)
    df, columns = load_trajectory(trajectory_csv(times, (1.0 + times ** 2) ** 0.25))
    summary = norm_summary(df, columns)
    assert summary.loc[0, "k"] == "1"
    assert summary.loc[0, "Growth Ratio"] == pytest.approx(np.sqrt(np.sqrt(1.0 + 1000.0 ** 2)))
    exponents = local_exponents(df, "norm_k1", windows=4)
    assert len(exponents) == 4
    assert np.allclose(exponents["local exponent"], 0.5)
