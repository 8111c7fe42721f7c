from __future__ import annotations

import math

import numpy as np
import pytest

from helpers import tiny_model, unit_table
from oracles import flops_decode_ref, flops_prefill_ref

from stagesched.catalog import ExecutionPlan, ModelSpec
from stagesched.costmodel import (DECODE, PREFILL, CostTable, IterationDescriptor, PhaseCoefficients,
                                  ProfileSample, fit_coefficients, flops_decode, flops_prefill, iter_latency,
                                  kernel_flops, read_profile_csv)
from stagesched.errors import ConfigError, FitError


def test_flops_small_example():
    m = ModelSpec("m", 2, 4, 10, 64, 1, 0, (1, 2))
    # prefill of one 3-token sequence: L * (c*B*s + 2*h*B*s^2)
    assert flops_prefill(m, IterationDescriptor(PREFILL, 1, 3, 0), 1) == 2 * (10 * 3 + 2 * 4 * 9)
    assert flops_decode(m, IterationDescriptor(DECODE, 5, 0, 20), 2) == 2 * (10 * 5 * 2 + 2 * 4 * 20) / 2
    assert flops_prefill(m, IterationDescriptor(PREFILL, 2, 7, 0), 2) == float(flops_prefill_ref(2, 4, 10, 2, 7, 2))
    assert flops_decode(m, IterationDescriptor(DECODE, 3, 0, 9), 1) == float(flops_decode_ref(2, 4, 10, 3, 9, 1))


def test_kernel_flops_matches_descriptor_form():
    m = ModelSpec("m", 3, 8, 100, 64, 1, 0, (1, 2))
    assert kernel_flops("prefill", 3, 8, 100, 2, 4, 5, 0) == flops_prefill(m, IterationDescriptor(PREFILL, 4, 5, 0), 2)
    assert kernel_flops("decode", 3, 8, 100, 1, 4, 0, 17) == flops_decode(m, IterationDescriptor(DECODE, 4, 0, 17), 1)


def test_iteration_latency_is_sum_of_phases():
    m = tiny_model()
    t = unit_table()
    # unit table: comp 1 s flat, prep 0.5 s per token in x
    assert iter_latency(t, m, 1, IterationDescriptor(DECODE, 3, 0, 10)) == pytest.approx(1 + 0.5 * 3)


def test_dense_interpolates_and_clamps():
    pc = PhaseCoefficients("comp", {1: (1.0, 0.0), 5: (5.0, 4.0)})
    a, b = pc.dense(8)
    assert a[3] == pytest.approx(3.0)
    assert b[3] == pytest.approx(2.0)
    assert a[7] == 5.0 and a[0] == 1.0


def test_negative_slope_is_rejected_in_table_and_clamped_in_fit():
    with pytest.raises(ConfigError):
        PhaseCoefficients("comp", {1: (-1.0, 0.0)})
    samples = [ProfileSample("m", 1, ph, 1, x, 2.0 - 0.001 * x) for ph in ("comp", "prep", "samp")
               for x in (1.0, 2.0, 3.0)]
    t = fit_coefficients(samples)
    a, b = t.coefficients[("m", 1)]["comp"].entries[1]
    assert a == 0.0 and b == pytest.approx(2.0 - 0.002)


def test_fit_needs_two_distinct_x():
    samples = [ProfileSample("m", 1, ph, 1, 3.0, 1.0) for ph in ("comp", "prep", "samp")]
    with pytest.raises(FitError, match="2 distinct"):
        fit_coefficients(samples)


def test_fit_needs_every_phase():
    with pytest.raises(FitError, match="phase"):
        fit_coefficients([ProfileSample("m", 1, "comp", 1, x, x) for x in (1.0, 2.0)])


def test_trim_removes_outliers():
    rng = np.random.default_rng(0)
    xs = rng.uniform(1, 100, 100)
    ys = 0.01 * xs + 1.0
    ys[:5] += 50.0
    samples = [ProfileSample("m", 1, ph, 1, float(x), float(y)) for ph in ("comp", "prep", "samp")
               for x, y in zip(xs, ys)]
    plain = fit_coefficients(samples).coefficients[("m", 1)]["comp"].entries[1]
    trimmed = fit_coefficients(samples, 0.1).coefficients[("m", 1)]["comp"].entries[1]
    assert abs(trimmed[0] - 0.01) < 1e-9 < abs(plain[0] - 0.01)


def test_cost_table_roundtrip_and_missing_loading():
    t = unit_table()
    t.set_loading_time("toy", ExecutionPlan(2, 1), 3.5)
    back = CostTable.from_dict(t.to_dict())
    assert back.to_dict() == t.to_dict()
    assert back.loading_time("toy", ExecutionPlan(2, 1)) == 3.5
    with pytest.raises(ConfigError):
        back.loading_time("toy", ExecutionPlan(4, 1))


def test_profile_csv_reader(tmp_path):
    p = tmp_path / "prof.csv"
    p.write_text("model_id,tp,phase,B,x,latency_s\nm,1,comp,1,10,0.5\nm,1,comp,1,20,0.7\n")
    rows = read_profile_csv(p)
    assert rows[1] == ProfileSample("m", 1, "comp", 1, 20.0, 0.7)
    bad = tmp_path / "bad.csv"
    bad.write_text("model_id,tp\nm,1\n")
    with pytest.raises(ConfigError):
        read_profile_csv(bad)
