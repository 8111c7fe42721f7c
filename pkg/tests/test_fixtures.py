from __future__ import annotations

import pytest

from stagesched.fixtures import FIXTURES, get_fixture
from stagesched.errors import ConfigError


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_fixture_builds_and_writes(name, tmp_path):
    fx = get_fixture(name)
    ctx = fx.context(seed=1)
    assert ctx.workload.total_output_tokens() > 0
    paths = fx.write(tmp_path, seed=1)
    assert {"models", "gpus", "cost_table", "ecdf", "app", "requests", "lengths"} <= set(paths)


def test_sampled_lengths_are_seeded():
    fx = get_fixture("chain_summary")
    assert fx.sampled_lengths(3) == fx.sampled_lengths(3)
    assert fx.sampled_lengths(3) != fx.sampled_lengths(4)


def test_unknown_fixture():
    with pytest.raises((ConfigError, KeyError)):
        get_fixture("nope")
