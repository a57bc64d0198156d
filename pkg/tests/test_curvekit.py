import numpy as np
import pytest

from perfkit.curvekit import (CurveSet, TimeSeries, detect_onset, detect_peak,
                              load_curves, resample, save_curves, smooth)
from perfkit.errors import DomainError, FormatError

from oracles import linear_interp, sliding_average


def make_series(values, dt=1.0, valid=None, start=0.0):
    values = np.asarray(values, dtype=float)
    if valid is None:
        valid = np.ones(len(values), dtype=bool)
    return TimeSeries(dt, start, values, np.asarray(valid, dtype=bool))


class TestTimeSeries:
    def test_invariants(self):
        with pytest.raises(DomainError):
            TimeSeries(0.0, 0.0, np.ones(3), np.ones(3, dtype=bool))
        with pytest.raises(DomainError):
            TimeSeries(1.0, 0.0, np.ones(3), np.ones(4, dtype=bool))
        with pytest.raises(DomainError):
            TimeSeries(1.0, 0.0, np.array([1.0, np.nan]), np.ones(2, dtype=bool))
        # non-finite values are fine while masked invalid
        ts = TimeSeries(1.0, 0.0, np.array([1.0, np.nan]), np.array([True, False]))
        assert ts.n_valid() == 1

    def test_times(self):
        ts = make_series([0, 1, 2], dt=0.5, start=2.0)
        assert np.allclose(ts.times, [2.0, 2.5, 3.0])
        assert ts.end_time_s == 3.0


class TestCsvRoundTrip:
    def test_load_basic(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text(
            "patient_id,roi_id,frame_index,time_s,value,valid\n"
            "p1,ROI1,0,0.0,0.1,1\n"
            "p1,ROI1,1,0.03333333333333333,0.2,1\n"
            "p1,ROI1,2,0.06666666666666667,0.3,1\n")
        cs = load_curves(p)
        assert len(cs) == 1
        ts = cs[("p1", "ROI1")]
        assert len(ts) == 3
        assert abs(ts.sample_period_s - 1 / 30) < 1e-12

    def test_missing_frame_becomes_invalid(self, tmp_path):
        p = tmp_path / "c.csv"
        lines = ["patient_id,roi_id,frame_index,time_s,value,valid"]
        for k in range(10):
            if k == 5:
                continue
            lines.append(f"p1,ROI1,{k},{float(k)},{0.1 * k},1")
        p.write_text("\n".join(lines) + "\n")
        ts = load_curves(p)[("p1", "ROI1")]
        assert len(ts) == 10
        assert not ts.valid[5]
        assert ts.valid.sum() == 9

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("patient_id,roi_id,frame_index,time_s,value\n")
        with pytest.raises(FormatError, match="valid"):
            load_curves(p)

    def test_duplicate_row(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("patient_id,roi_id,frame_index,time_s,value,valid\n"
                     "p1,ROI1,0,0.0,0.1,1\np1,ROI1,0,0.0,0.1,1\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_curves(p)

    def test_nonuniform_spacing(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("patient_id,roi_id,frame_index,time_s,value,valid\n"
                     "p1,ROI1,0,0.0,0.1,1\np1,ROI1,1,1.0,0.1,1\np1,ROI1,2,2.5,0.1,1\n")
        with pytest.raises(FormatError, match="spacing"):
            load_curves(p)

    def test_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(7)
        entries = {}
        for pi in range(3):
            for ri in range(2):
                n = int(rng.integers(5, 40))
                values = rng.uniform(0, 2, n)
                valid = rng.uniform(size=n) > 0.2
                valid[0] = valid[-1] = True
                entries[(f"p{pi}", f"ROI{ri}")] = TimeSeries(0.25, 1.5, values, valid)
        cs = CurveSet(entries)
        f1 = tmp_path / "a.csv"
        f2 = tmp_path / "b.csv"
        save_curves(cs, f1)
        cs2 = load_curves(f1)
        save_curves(cs2, f2)
        cs3 = load_curves(f2)
        assert cs2.keys() == cs.keys() == cs3.keys()
        for key in cs.keys():
            a, b = cs2[key], cs3[key]
            ref = cs[key]
            for other in (a, b):
                assert other.sample_period_s == ref.sample_period_s
                assert other.start_time_s == ref.start_time_s
                # invalid samples round-trip with their stored value
                assert np.array_equal(other.valid, ref.valid)
                assert np.array_equal(other.values, ref.values)


class TestSmooth:
    def test_constant_preserved(self):
        ts = make_series(np.full(20, 0.3))
        out = smooth(ts, 4.0)
        assert np.max(np.abs(out.values - 0.3)) < 1e-12
        assert np.array_equal(out.valid, ts.valid)

    def test_zero_window_identity(self):
        ts = make_series([0.1, 0.5, 0.2])
        out = smooth(ts, 0.0)
        assert np.array_equal(out.values, ts.values)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        values = rng.uniform(0, 1, 200)
        valid = rng.uniform(size=200) > 0.15
        ts = make_series(values, dt=0.5, valid=valid)
        out = smooth(ts, 2.0)  # half-width = 2 samples
        ref_vals, ref_valid = sliding_average(values, valid, 2)
        assert np.array_equal(out.values, ref_vals)
        assert np.array_equal(out.valid, ref_valid)

    def test_preserves_length_and_idempotent_on_constant(self):
        ts = make_series(np.full(31, 1.25), dt=0.1)
        once = smooth(ts, 1.0)
        twice = smooth(once, 1.0)
        assert len(once) == len(ts)
        assert np.max(np.abs(twice.values - once.values)) < 1e-12


class TestOnset:
    def test_step_series(self):
        ts = make_series([0, 0, 0, 1, 1, 1, 1, 1, 1, 1], dt=1.0)
        lm = detect_onset(ts, baseline_window_s=5.0, k_sigma=3.0)
        assert lm.onset_index == 3
        assert lm.onset_time_s == 3.0
        assert lm.baseline_value == 0.0

    def test_constant_has_no_onset(self):
        ts = make_series(np.full(30, 0.7))
        with pytest.raises(DomainError, match="no onset"):
            detect_onset(ts)

    def test_too_few_samples(self):
        ts = make_series([0, 0, 1, 1, 1], dt=1.0)
        with pytest.raises(DomainError):
            detect_onset(ts)


class TestPeak:
    def test_simple(self):
        assert detect_peak(make_series([0, 1, 0])).peak_index == 1

    def test_tie_earliest(self):
        lm = detect_peak(make_series([1, 1, 1]))
        assert lm.peak_index == 0

    def test_all_invalid(self):
        ts = make_series([1, 2, 3], valid=[False, False, False])
        with pytest.raises(DomainError):
            detect_peak(ts)

    def test_matches_scan(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            values = rng.uniform(0, 1, 50)
            valid = rng.uniform(size=50) > 0.1
            if not valid.any():
                continue
            ts = make_series(values, valid=valid)
            lm = detect_peak(ts)
            best, best_i = -np.inf, None
            for i in range(50):
                if valid[i] and values[i] > best:
                    best, best_i = values[i], i
            assert lm.peak_index == best_i


class TestResample:
    def test_identity_period(self):
        ts = make_series([0.0, 1.0, 0.5], dt=0.2)
        out = resample(ts, 0.2)
        assert np.array_equal(out.values, ts.values)

    def test_linear_ramp_half_period(self):
        ts = make_series(np.arange(5, dtype=float), dt=1.0)
        out = resample(ts, 0.5)
        assert np.allclose(out.values, np.arange(0, 4.01, 0.5))
        assert out.valid.all()

    def test_matches_interp_oracle(self):
        rng = np.random.default_rng(5)
        values = rng.uniform(0, 1, 40)
        valid = rng.uniform(size=40) > 0.2
        ts = make_series(values, dt=0.7, valid=valid, start=3.0)
        for new_dt in (0.3, 1.3):
            out = resample(ts, new_dt)
            for i, t in enumerate(out.times):
                ref, ok = linear_interp(ts.times, values, valid, t)
                assert out.valid[i] == ok
                if ok:
                    assert abs(out.values[i] - ref) < 1e-12

    def test_invalid_bracket_propagates(self):
        ts = make_series([0, 1, 2, 3], dt=1.0, valid=[True, False, True, True])
        out = resample(ts, 0.5)
        # outputs in (0, 2) touch the invalid sample at t=1
        assert not out.valid[1]  # t=0.5
        assert not out.valid[2]  # t=1.0
        assert not out.valid[3]  # t=1.5
        assert out.valid[0] and out.valid[4]
