from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stagesched.errors import ConfigError
from stagesched.sampler import (build_ecdf, ecdfs_from_dict, ecdfs_to_dict, read_trace_csv,
                                sample_output_length, uniform_variate)


def test_quantile_is_left_continuous_inverse():
    e = build_ecdf([5, 1, 3, 3])
    assert e.sorted_lengths == (1, 3, 3, 5)
    assert e.quantile(0.0) == 1
    assert e.quantile(0.25) == 1
    assert e.quantile(0.26) == 3
    assert e.quantile(0.75) == 3
    assert e.quantile(0.99) == 5
    assert e.cdf(3) == 0.75


def test_variate_is_deterministic_and_seed_dependent():
    assert uniform_variate(1, "a") == uniform_variate(1, "a")
    assert uniform_variate(1, "a") != uniform_variate(2, "a")
    assert 0.0 <= uniform_variate(9, "zz") < 1.0


def test_samples_follow_source_distribution():
    rng = np.random.default_rng(0)
    src = rng.integers(1, 500, 3000)
    e = build_ecdf(src.tolist())
    draws = [sample_output_length(e, 0, 10_000, None, 3, f"r{i}") for i in range(20_000)]
    assert stats.ks_2samp(src, draws).statistic < 0.02


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 300), st.integers(0, 400), st.integers(1, 10_000))
def test_caps_only_shorten(l_in, cap, seed):
    e = build_ecdf(range(0, 600, 7))
    free = sample_output_length(e, l_in, 300, None, seed, "x")
    capped = sample_output_length(e, l_in, 300, cap, seed, "x")
    assert capped == min(free, cap)
    assert 0 <= capped <= 300 - l_in


def test_input_longer_than_context_is_an_error():
    with pytest.raises(ConfigError):
        sample_output_length(build_ecdf([1]), 20, 10)


def test_ecdf_json_and_csv(tmp_path):
    p = tmp_path / "trace.csv"
    p.write_text("model_id,output_len\na,3\nb,7\na,1\n")
    ecdfs = read_trace_csv(p)
    assert ecdfs["a"].sorted_lengths == (1, 3)
    assert ecdfs_from_dict(ecdfs_to_dict(ecdfs)) == ecdfs
    with pytest.raises(ConfigError):
        build_ecdf([])
