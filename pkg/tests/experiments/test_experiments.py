"""
Long running reproductions of the published ratios. Skipped unless
PEVSCHED_EXPERIMENTS=1; PEVSCHED_REPLICATIONS sets the replication count
and PEVSCHED_PROCESSES the worker processes.
::

    PEVSCHED_EXPERIMENTS=1 PEVSCHED_PROCESSES=8 pytest tests/experiments
"""
import os
import pytest

import pevsched.scenario

pytestmark = pytest.mark.skipif(
    os.environ.get("PEVSCHED_EXPERIMENTS") != "1",
    reason="set PEVSCHED_EXPERIMENTS=1 to run the long experiments")

REPLICATIONS = int(os.environ.get("PEVSCHED_REPLICATIONS", "1000"))
PROCESSES = int(os.environ.get("PEVSCHED_PROCESSES", "1"))

# Mean ratio per scenario at q = 1.46 and how far we may stray from it.
TABLE = {
    'orchard': ([1.068, 1.104, 1.133], 0.04),
    'oa': ([1.135, 1.197, 1.240], 0.04),
    'avg': ([1.530, 1.645, 1.701], 0.12),
    'eg': ([2.346, 2.309, 2.273], 0.12),
}

# ORCHARD trails OA and the baselines come out below the published means, see
# "Published ratios" in DESIGN.md.
DEVIATION = pytest.mark.xfail(
    strict=False, reason="measured ratios differ from the published table")

@DEVIATION
@pytest.mark.parametrize('n', [1, 2, 3])
def test_mean_ratios(n):
    config = pevsched.scenario.scenario_config(n)
    results = pevsched.scenario.run_replications(
        config, range(REPLICATIONS), processes=PROCESSES)
    summary = pevsched.scenario.aggregate_ratios(results)
    means = dict(zip(summary["algorithm"], summary["mean_ratio"]))
    print(summary.to_string(index=False))

    for algorithm, (expected, tolerance) in TABLE.items():
        assert means[algorithm] == pytest.approx(
            expected[n - 1], abs=tolerance), algorithm
    assert means['orchard'] < means['oa'] < means['avg'] < means['eg']
    assert (summary["max_ratio"] >= pevsched.scenario.RATIO_FLOOR).all()

@DEVIATION
@pytest.mark.parametrize('n, best_q, best_ratio', [
    (1, (1.6, 2.0), 1.053),
    (3, (2.1, 2.6), 1.050)])
def test_q_sweep(n, best_q, best_ratio):
    config = pevsched.scenario.scenario_config(n)
    q_values = [round(1.0 + 0.1 * i, 1) for i in range(21)]
    sweep = pevsched.scenario.q_sweep(
        config, q_values, min(REPLICATIONS, 500), processes=PROCESSES)
    print(sweep.frame.to_string(index=False))

    low, high = best_q
    assert low <= sweep.best_q <= high
    assert sweep.best_ratio == pytest.approx(best_ratio, abs=0.02)
