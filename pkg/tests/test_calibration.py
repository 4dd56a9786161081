import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from lobmm.calibration import (
    CalibrationSet,
    IntensityTable,
    accumulate,
    build_regen_table,
    calibrate,
    diagnostics,
    estimate_intensities,
    finalize,
    fit_geometric,
    fit_limit_cancel,
    fit_market_mixture,
    fit_truncated_geometric,
    truncgeom_mle,
    write_tables,
)
from lobmm.eventio import write_events
from lobmm.order_flow import TruncatedGeometricLaw
from lobmm.rng import UniformStream, substream
from lobmm.simulator import ModelSpec, to_records, run
from lobmm.synthetic import market_table_law, model0_stable, desk_futures


def _nll(p, samples, Q):
    return -float(np.sum(np.log(TruncatedGeometricLaw(p, Q).pmf_array()[samples - 1])))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 0.9), st.integers(3, 40), st.integers(0, 2**31))
def test_truncgeom_mle_matches_numerical_optimum(p0, Q, seed):
    u = UniformStream(substream(seed, "tg"))
    law = TruncatedGeometricLaw(p0, Q)
    s = np.array([law.sample(u) for _ in range(400)])
    if (s == 1).all():
        return
    fit = fit_truncated_geometric(s, Q).p0
    ref = minimize_scalar(_nll, bounds=(1e-6, 1 - 1e-9), args=(s, Q), method="bounded",
                          options={"xatol": 1e-10}).x
    assert fit == pytest.approx(ref, abs=1e-6)


def test_truncgeom_mle_edge_cases():
    assert truncgeom_mle([(5, 10.0, 0.0)]) == 1.0
    with pytest.raises(ValueError):
        truncgeom_mle([])
    with pytest.raises(ValueError):
        fit_truncated_geometric([1, 9], 5)


def test_geometric_fit_is_inverse_mean():
    assert fit_geometric([1, 2, 3]).p0 == pytest.approx(0.5)


def test_limit_cancel_flags_thin_cells():
    limits = {3: {1: 300, 2: 100}, 4: {1: 5}}
    cancels = {3: {1: 250, 2: 50, 3: 10}, 4: {2: 3}}
    fit = fit_limit_cancel(limits, cancels, min_count=200)
    assert fit.p0_L[3] == pytest.approx(400 / 500)
    assert fit.flagged == {"L": [4], "C": [4]}
    assert fit.p0_L[4] == fit.pooled_L
    assert fit.p0_C[4] == fit.pooled_C


def _mixture_sample(Q, n, seed):
    law = market_table_law(Q)
    pm = law.pmf_array()
    return law, substream(seed, "em").choice(np.arange(1, Q + 1), size=n, p=pm / pm.sum())


def test_em_monotone_and_recovers_small():
    law, s = _mixture_sample(25, 20_000, 5)
    fit = fit_market_mixture(s, 25)
    assert fit.converged and fit.monotone
    assert fit.law.p0 == pytest.approx(law.p0, abs=0.03)
    for a, b in zip(fit.law.theta, law.theta):
        assert a == pytest.approx(b, abs=0.02)


def test_em_rejects_out_of_range():
    with pytest.raises(ValueError):
        fit_market_mixture([0, 1], 5)
    with pytest.raises(ValueError):
        fit_market_mixture([], 5)


def test_intensity_table_fill_nearest():
    lam = IntensityTable.from_rates([1.0, 2.0, 3.0], [0.5] * 3, [0.1] * 3)
    lam.occupation[2] = 0.0
    lam.lam["L"][2] = np.nan
    f = lam.filled()
    assert f.lam["L"][2] in (1.0, 3.0)
    assert np.isnan(f.lam["L"][0])


def test_intensity_dict_roundtrip():
    lam = IntensityTable.from_rates([1.0, np.nan], [0.5, 0.5], [0.1, 0.1])
    back = IntensityTable.from_dict(lam.to_dict())
    assert np.isnan(back.lam["L"][2]) and back.lam["C"][1] == 0.5


@pytest.fixture(scope="module")
def model0_day():
    spec = ModelSpec.from_calibration(model0_stable(20, 12), "0", seed=7, q_max=20)
    res = run(spec, 3000.0, record=True)
    return spec, res, to_records(res.path)


def test_intensities_recovered_from_model0_stream(model0_day):
    spec, res, recs = model0_day
    tab = estimate_intensities(recs, q_max=20)
    ok = total = 0
    for kind, truth in (("L", spec.lam_L), ("C", spec.lam_C), ("M", spec.lam_M)):
        for q in range(1, 20):
            occ = tab.occupation[q]
            if occ < 50:
                continue
            se = math.sqrt(truth[q] / occ)
            total += 1
            ok += abs(tab.lam[kind][q] - truth[q]) <= 3 * se
    assert total > 20 and ok / total >= 0.9


def test_counts_match_simulator(model0_day):
    spec, res, recs = model0_day
    st = accumulate(recs, q_max=20)
    for k in "LCM":
        # the snapshot-free first record is not counted
        assert st.counts["B"][k].sum() + st.counts["A"][k].sum() == pytest.approx(res.stats.counts[k].sum(), abs=1)


def test_regen_table_from_stream():
    spec = ModelSpec.from_calibration(desk_futures(20), "II", seed=3, q_max=20)
    recs = to_records(run(spec, 2000.0, record=True).path)
    t = build_regen_table(recs, q_max=20)
    assert t.p_follow and t.counts["_skipped"] <= 1
    # follows after market removals dominate, as in the generating table
    fm = [v for k, v in t.p_follow.items() if k.startswith("M|")]
    fc = [v for k, v in t.p_follow.items() if k.startswith("C|")]
    assert np.mean(fm) > np.mean(fc)


def test_calibrate_files_and_roundtrip(tmp_path, model0_day):
    _, _, recs = model0_day
    half = len(recs) // 2
    p1, p2 = tmp_path / "d1.csv", tmp_path / "d2.csv"
    write_events(p1, recs[:half])
    write_events(p2, recs[half:])
    cal, st = calibrate([p1, p2], q_max=20, min_count=50)
    assert st.records == len(recs)
    out = tmp_path / "model.v1.json"
    cal.save(out)
    back = CalibrationSet.load(out)
    assert back.to_dict() == cal.to_dict()
    assert set(back.meta["flagged"]) == {"L", "C", "M"}


def test_calibration_schema_checked():
    with pytest.raises(ValueError, match="schema"):
        CalibrationSet.from_dict({"schema": "other"})


def test_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        calibrate([tmp_path / "nope.csv"])


def test_diagnostics_tables(tmp_path):
    spec = ModelSpec.from_calibration(desk_futures(20), "II", seed=4, q_max=20)
    st = accumulate(to_records(run(spec, 1000.0, record=True).path), q_max=20)
    tabs = diagnostics(st)
    assert set(tabs) == {"independence", "follow_by_qr", "qr_cdf", "intensity_regimes"}
    cdf = [r[2] for r in tabs["qr_cdf"][1:] if r[0] == "M"]
    assert cdf == sorted(cdf) and cdf[-1] == pytest.approx(1.0)
    paths = write_tables(tabs, tmp_path)
    assert all(p.read_text().count("\n") == len(tabs[p.stem]) for p in paths)


def test_revealed_queue_law_recovered():
    spec = ModelSpec.from_calibration(desk_futures(20), "II", seed=5, q_max=20)
    cal = finalize(accumulate(to_records(run(spec, 5000.0, record=True).path), q_max=20), min_count=50)
    got = np.array(cal.hidden_law.pmf_values)
    want = np.array(spec.hidden_law.pmf_values)
    assert cal.meta["revealed_count"] > 1000
    assert 0.5 * np.abs(got - want).sum() < 0.03
