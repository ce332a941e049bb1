import numpy as np
import pytest
from hypothesis import given, strategies as st

from spikegrid.energy import (
    TABLE1, ActivityReport, EnergyModel, count_raster, neuron_power_mw, power, table1_rows,
)


@pytest.mark.parametrize("row", TABLE1, ids=[r[0] for r in TABLE1])
def test_table1_recomputed_within_half_percent(row):
    arch, n_on, n_off, e, p_on, p_off = row
    # independent arithmetic: N * E[J] * f[Hz] in mW
    assert n_on * e * 1e-12 * 1e6 * 1e3 == pytest.approx(p_on, rel=5e-3)
    assert n_off * e * 1e-12 * 1e6 * 1e3 == pytest.approx(p_off, rel=5e-3, abs=1e-12)
    r = next(r for r in table1_rows() if r["architecture"] == arch)
    assert r["P_on"] == pytest.approx(p_on, rel=5e-3)


def test_snn_idle_power_is_zero():
    rep = ActivityReport("snn", 300.0, 0.0, 2, 1.0)
    p_on, p_off = power(rep, EnergyModel(23.6))
    assert p_off == 0.0 and p_on > 0


def test_empty_on_state_gives_nan():
    p_on, _ = power(ActivityReport("snn", None, 0.0, 0, 1.0), EnergyModel(23.6))
    assert np.isnan(p_on)


@given(st.floats(0, 1e4), st.floats(1e-3, 1e3), st.floats(1.0, 1e9))
def test_power_is_linear(n, e, f):
    assert neuron_power_mw(2 * n, e, f) == pytest.approx(2 * neuron_power_mw(n, e, f))


def test_validation():
    with pytest.raises(ValueError):
        EnergyModel(0.0)
    with pytest.raises(ValueError):
        ActivityReport("lstm", 1.0, 0.0, 0, 0.0)
    with pytest.raises(ValueError):
        ActivityReport("snn", -1.0, 0.0, 0, 0.0)


def test_count_raster_dense_rule():
    bits = np.array([1, 0, 0, 0, 0, 0], bool)
    h1 = np.array([0, 1, 0, 0], bool)
    h2 = np.zeros(3, bool)
    # inputs: 1; layer 1: all 4 receive; layer 2: all 3 receive; output silent
    assert count_raster([(0, bits, [h1, h2])], n_out=2)[0] == 1 + 4 + 3
    h2[0] = True
    assert count_raster([(0, bits, [h1, h2])], n_out=2)[0] == 1 + 4 + 3 + 2
    zero = [(0, np.zeros(6, bool), [np.zeros(4, bool), np.zeros(3, bool)])]
    assert count_raster(zero)[0] == 0
