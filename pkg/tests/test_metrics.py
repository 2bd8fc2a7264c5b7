import math

import jsonschema
import numpy as np
import pytest

from cyclerl.metrics import (
    MetricsReport,
    REPORT_SCHEMA_VERSION,
    balance_success_rate,
    command_change_mask,
    max_balance_duration,
    recovery_time,
    response_latencies,
    settled_mask,
    tracking_errors,
)
from cyclerl.schemas import report_schema


class TestBsr:
    def test_all_upright(self):
        phi = np.zeros((5, 100))
        alive = np.ones_like(phi, dtype=bool)
        assert balance_success_rate(phi, alive) == 100.0

    def test_one_of_two_fails(self):
        phi = np.zeros((2, 100))
        phi[1, 50] = 0.6  # single excursion past 0.5 rad
        alive = np.ones_like(phi, dtype=bool)
        assert balance_success_rate(phi, alive) == 50.0

    def test_strict_bound(self):
        phi = np.full((1, 10), 0.4999)
        alive = np.ones_like(phi, dtype=bool)
        assert balance_success_rate(phi, alive) == 100.0
        phi[0, 3] = 0.5
        assert balance_success_rate(phi, alive) == 0.0

    def test_dead_steps_ignored(self):
        phi = np.zeros((1, 10))
        phi[0, 7:] = 3.0  # after the episode already ended
        alive = np.ones((1, 10), dtype=bool)
        alive[0, 7:] = False
        assert balance_success_rate(phi, alive) == 100.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            balance_success_rate(np.zeros((0, 5)), np.zeros((0, 5), dtype=bool))


class TestMbdAndRecovery:
    def test_longest_run(self):
        phi = np.zeros((1, 10))
        phi[0, [3, 7]] = 0.6
        alive = np.ones_like(phi, dtype=bool)
        # runs: 3, 3, 2 -> longest 3 steps at dt=0.5
        assert max_balance_duration(phi, alive, 0.5) == pytest.approx(1.5)

    def test_recovery_time_definition(self):
        t = np.arange(0, 5, 0.02)
        phi = np.where(t < 1.2, 0.35, 0.05)  # enters the band at t=1.2 and stays
        assert recovery_time(phi, t, 0.0) == pytest.approx(1.2, abs=1e-9)

    def test_already_recovered(self):
        t = np.arange(0, 3, 0.02)
        phi = np.full_like(t, 0.01)
        assert recovery_time(phi, t, 0.5) == pytest.approx(0.0)

    def test_band_must_sustain(self):
        t = np.arange(0, 5, 0.02)
        phi = np.where((t > 1.0) & (t < 1.5), 0.05, 0.35)  # only 0.5 s inside
        assert recovery_time(phi, t, 0.0) is None

    def test_never_recovers(self):
        t = np.arange(0, 2, 0.02)
        assert recovery_time(np.full_like(t, 0.4), t, 0.0) is None


class TestTrackingErrors:
    def test_perfect_tracking(self):
        T = 200
        z = np.zeros((1, T))
        alive = np.ones((1, T), dtype=bool)
        v = np.full((1, T), 2.0)
        ste, vte = tracking_errors(z, z, v, v, alive, 0.02)
        assert ste == 0.0 and vte == 0.0

    def test_constant_offset(self):
        T = 200
        delta_cmd = np.zeros((1, T))
        delta = delta_cmd + math.radians(2.0)
        v = np.full((1, T), 2.0)
        alive = np.ones((1, T), dtype=bool)
        ste, _ = tracking_errors(delta, delta_cmd, v, v, alive, 0.02)
        assert ste == pytest.approx(2.0, abs=1e-12)

    def test_sinusoid_rms_closed_form(self):
        # settled window holds 1000 samples covering exactly 4 periods
        dt, T, A = 0.02, 1050, math.radians(3.0)
        k = np.arange(T)
        delta_cmd = np.zeros((1, T))
        delta = (A * np.sin(2 * math.pi * 4 * (k - 50) / 1000.0))[None, :]
        v = np.full((1, T), 2.0)
        alive = np.ones((1, T), dtype=bool)
        ste, _ = tracking_errors(delta, delta_cmd, v, v, alive, dt)
        assert ste == pytest.approx(math.degrees(A) / math.sqrt(2.0), abs=1e-9)

    def test_settling_window_excluded(self):
        dt, T = 0.02, 300
        delta_cmd = np.zeros((1, T))
        delta_cmd[0, 100:] = 0.1          # command change at k=100
        delta = delta_cmd.copy()
        delta[0, 100:130] = 0.0           # transient error within 0.6 s of change
        v = np.full((1, T), 2.0)
        alive = np.ones((1, T), dtype=bool)
        ste, vte = tracking_errors(delta, delta_cmd, v, v, alive, dt)
        assert ste == 0.0 and vte == 0.0

    def test_mask_helpers(self):
        v_cmd = np.array([[1.0, 1.0, 2.0, 2.0, 2.0]])
        d_cmd = np.zeros((1, 5))
        chg = command_change_mask(v_cmd, d_cmd)
        assert chg.tolist() == [[False, False, True, False, False]]
        mask = settled_mask(v_cmd, d_cmd, dt=1.0, settle=2.0)
        assert mask.tolist() == [[False, False, False, False, True]]


class TestResponseLatency:
    def test_step_already_inside_band(self):
        T = 100
        t = np.arange(T) * 0.02
        cmd = np.zeros((1, T))
        cmd[0, 10:] = 2.0
        tracked = np.full((1, T), 1.95)  # within 10% of 2.0 from the start
        alive = np.ones((1, T), dtype=bool)
        lats, timeouts = response_latencies(tracked, cmd, t[None], alive)
        assert lats == [0.0] and timeouts == 0

    def test_first_order_response_tau_ln10(self):
        tau, dt, T = 0.4, 0.02, 800
        t = np.arange(T) * dt
        i0 = 50
        cmd = np.zeros((1, T))
        cmd[0, i0:] = 3.0
        tracked = np.zeros((1, T))
        tracked[0, i0:] = 3.0 * (1.0 - np.exp(-(t[i0:] - t[i0]) / tau))
        alive = np.ones((1, T), dtype=bool)
        lats, timeouts = response_latencies(tracked, cmd, t[None], alive)
        assert timeouts == 0
        assert abs(lats[0] - tau * math.log(10.0)) <= dt

    def test_timeout_counted(self):
        T = 60
        t = np.arange(T) * 0.02
        cmd = np.zeros((1, T))
        cmd[0, 10:] = 4.0
        tracked = np.zeros((1, T))  # never moves
        alive = np.ones((1, T), dtype=bool)
        lats, timeouts = response_latencies(tracked, cmd, t[None], alive)
        assert lats == [] and timeouts == 1

    def test_band_floor_for_near_zero_target(self):
        T = 40
        t = np.arange(T) * 0.02
        cmd = np.full((1, T), 0.2)
        cmd[0, 10:] = 0.0  # 10% band would be zero-width without the floor
        tracked = np.full((1, T), 0.002)
        alive = np.ones((1, T), dtype=bool)
        lats, timeouts = response_latencies(tracked, cmd, t[None], alive,
                                            floor=0.05)
        assert lats == [0.0] and timeouts == 0


class TestReportSchema:
    def test_valid_report_passes(self):
        rep = MetricsReport(
            schema_version=REPORT_SCHEMA_VERSION, scenario="flat",
            controller="lqr", seed=0, episodes=8, duration_steps=100, dt=0.02,
            bsr=87.5, ste_deg=1.2, vte_mps=0.2, srl_s=0.8, srl_events=10,
            srl_timeouts=0, mbd_s=2.0,
        )
        jsonschema.validate(rep.to_dict(), report_schema())

    def test_nan_serialized_as_null(self):
        rep = MetricsReport(
            schema_version=REPORT_SCHEMA_VERSION, scenario="flat",
            controller="pid", seed=0, episodes=1, duration_steps=10, dt=0.02,
            bsr=0.0, ste_deg=float("nan"),
        )
        d = rep.to_dict()
        assert d["ste_deg"] is None
        jsonschema.validate(d, report_schema())

    def test_schema_rejects_out_of_range(self):
        rep = MetricsReport(
            schema_version=REPORT_SCHEMA_VERSION, scenario="flat",
            controller="pid", seed=0, episodes=1, duration_steps=10, dt=0.02,
            bsr=101.0,
        )
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(rep.to_dict(), report_schema())

    def test_round_trip(self):
        rep = MetricsReport(
            schema_version=REPORT_SCHEMA_VERSION, scenario="steps",
            controller="policy", seed=3, episodes=16, duration_steps=3200,
            dt=0.02, bsr=93.75, brt_mean=1.4, brt_std=0.2,
        )
        again = MetricsReport.from_json(rep.to_json())
        assert again == rep
