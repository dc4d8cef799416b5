import json
import pytest
import numpy as np

import pevsched.check
import pevsched.model
from pevsched.model import (
    ChargingRequest, CostModel, TimeStamp, RateSchedule, ModelError,
    InstanceFormatError, InfeasibleRequestError, ScheduleMismatchError)

def request(id, arrival_h, deadline_h, demand, max_rate=3.3, capacity=35.0):
    return ChargingRequest.from_hours(
        id, arrival_h, deadline_h, demand, max_rate, capacity)

@pytest.fixture
def one_pev():
    """
    A single PEV parked over [0, 4] asking for 4 kWh.
    """
    requests = [request(1, 0, 4, 4.0)]
    return requests, pevsched.model.decompose_intervals(requests)

def test_timestamp():
    t = TimeStamp.from_hours(1.5)
    assert t.value == 1500
    assert t.hours == 1.5
    assert (t + 250).hours == 1.75
    assert TimeStamp.from_hours(4) - t == 2500
    assert t - 500 == TimeStamp(1000)
    assert TimeStamp.from_hours(0.0004) == TimeStamp(0)
    assert TimeStamp(1) < TimeStamp(2)
    assert sorted([TimeStamp(3), TimeStamp(1)]) == [TimeStamp(1), TimeStamp(3)]

    with pytest.raises(ModelError):
        TimeStamp(-1)

def test_request_validation():
    with pytest.raises(ModelError):
        request(1, 2, 2, 1.0)
    with pytest.raises(ModelError):
        request(1, 3, 2, 1.0)
    with pytest.raises(ModelError):
        request(1, 0, 2, -1.0)
    with pytest.raises(ModelError):
        request(1, 0, 2, 1.0, max_rate=0.0)
    with pytest.raises(ModelError):
        ChargingRequest(1, 0, 1000, 1.0, 1.0, 1.0)

    r = request(1, 0, 4, 13.0)
    assert r.window == 4.0
    assert r.max_energy == pytest.approx(13.2)

@pytest.mark.parametrize('demand, feasible', [
    (13.0, True),
    (14.0, False),
    (0.0, True)])
def test_check_request_feasible(demand, feasible):
    r = request(1, 0, 4, demand)
    assert pevsched.model.check_request_feasible(r) == feasible

def test_capacity_limits_feasibility():
    r = request(1, 0, 10, 17.0, max_rate=3.3, capacity=16.0)
    assert pevsched.model.check_request_feasible(r) == False

def test_reject_infeasible():
    requests = [request(1, 0, 4, 4.0), request(7, 1, 5, 14.0)]
    with pytest.raises(InfeasibleRequestError) as e:
        pevsched.model.reject_infeasible(requests)
    assert e.value.ids == [7]
    assert "7" in str(e.value)

    pevsched.model.reject_infeasible(requests[:1])

def test_decompose_single(one_pev):
    requests, decomp = one_pev
    assert [t.hours for t in decomp.boundaries] == [0.0, 4.0]
    assert list(decomp.lengths) == [4.0]
    assert decomp.parked == (frozenset([1]),)
    assert decomp.spans[1] == range(0, 1)

def test_decompose_overlapping():
    requests = [request(1, 0, 3, 1.0), request(2, 1, 4, 1.0)]
    decomp = pevsched.model.decompose_intervals(requests)
    assert [t.hours for t in decomp.boundaries] == [0.0, 1.0, 3.0, 4.0]
    assert list(decomp.lengths) == [1.0, 2.0, 1.0]
    assert decomp.parked == (
        frozenset([1]), frozenset([1, 2]), frozenset([2]))
    assert decomp.spans == {1: range(0, 2), 2: range(1, 3)}
    assert decomp.ids == [1, 2]

def test_decompose_identical_windows():
    requests = [request(1, 2, 5, 1.0), request(2, 2, 5, 1.0)]
    decomp = pevsched.model.decompose_intervals(requests)
    assert [t.hours for t in decomp.boundaries] == [2.0, 5.0]
    assert len(decomp) == 1
    assert decomp.parked[0] == frozenset([1, 2])

def test_decompose_gap_and_extra_boundaries():
    requests = [request(1, 0, 1, 1.0), request(2, 2, 3, 1.0)]
    decomp = pevsched.model.decompose_intervals(
        requests, extra_boundaries=[TimeStamp.from_hours(2.5)])
    assert [t.hours for t in decomp.boundaries] == [0.0, 1.0, 2.0, 2.5, 3.0]
    assert decomp.parked[1] == frozenset()
    assert decomp.spans[2] == range(2, 4)

def test_decompose_empty():
    decomp = pevsched.model.decompose_intervals([])
    assert len(decomp) == 0
    assert decomp.spans == {}

def test_decompose_duplicate_id():
    with pytest.raises(ModelError):
        pevsched.model.decompose_intervals(
            [request(1, 0, 1, 1.0), request(1, 0, 2, 1.0)])

def test_lengths_read_only(one_pev):
    _, decomp = one_pev
    with pytest.raises(ValueError):
        decomp.lengths[0] = 1.0

def test_rate_schedule(one_pev):
    _, decomp = one_pev
    schedule = RateSchedule(decomp, {(1, 0): 1.0})
    assert schedule.rate(1, 0) == 1.0
    assert list(schedule.totals) == [1.0]
    assert schedule.delivered(1) == 4.0
    assert schedule.intervals() == [
        {"start_h": 0.0, "end_h": 4.0, "total_kw": 1.0, "rates": {"1": 1.0}}]

    with pytest.raises(ScheduleMismatchError):
        RateSchedule(decomp, {(2, 0): 1.0})
    with pytest.raises(ScheduleMismatchError):
        RateSchedule(decomp, {(1, 1): 1.0})

def test_evaluate_cost():
    cost = CostModel(1e-4, 0.6e-4)

    requests = [request(1, 0, 1, 10.0, max_rate=10.0)]
    decomp = pevsched.model.decompose_intervals(requests)
    schedule = RateSchedule(decomp, {(1, 0): 10.0})
    assert pevsched.model.evaluate_cost(
        schedule, decomp, cost) == pytest.approx(0.007)

    schedule = RateSchedule(decomp, {})
    assert pevsched.model.evaluate_cost(schedule, decomp, cost) == 0.0

    requests = [request(1, 0, 3, 5.0)]
    decomp = pevsched.model.decompose_intervals(
        requests, extra_boundaries=[TimeStamp.from_hours(2)])
    schedule = RateSchedule(decomp, {(1, 0): 1.0, (1, 1): 3.0})
    assert pevsched.model.evaluate_cost(
        schedule, decomp, cost) == pytest.approx(1.16e-3)

@pytest.mark.parametrize('seed', range(20))
def test_decompose_partitions_windows(seed):
    """
    The intervals tile the time axis and a request is parked in exactly
    the intervals inside its window.
    """
    requests = pevsched.check.random_instance(seed, max_requests=20)
    decomp = pevsched.model.decompose_intervals(requests)

    boundaries = [t.value for t in decomp.boundaries]
    assert boundaries == sorted(set(boundaries))
    assert decomp.lengths.sum() == pytest.approx(
        (boundaries[-1] - boundaries[0]) / pevsched.model.MILLIHOURS)
    for r in requests:
        span = decomp.spans[r.id]
        assert decomp.start(span.start) == r.arrival
        assert decomp.end(span.stop - 1) == r.deadline
        for k in range(len(decomp)):
            assert (r.id in decomp.parked[k]) == (k in span)

def refined(schedule, requests, cuts):
    """
    The same rates on a decomposition with extra boundaries.
    """
    old = schedule.decomposition
    new = pevsched.model.decompose_intervals(requests, extra_boundaries=cuts)
    rates = {}
    for k in range(len(new)):
        parent = max(
            j for j in range(len(old)) if old.start(j).value <= new.start(k).value)
        for request_id in new.parked[k]:
            rates[(request_id, k)] = schedule.rate(request_id, parent)
    return RateSchedule(new, rates)

@pytest.mark.parametrize('seed', range(10))
def test_evaluate_cost_split_invariance(seed):
    """
    Cutting an interval in two without changing its rates leaves the cost
    alone.
    """
    cost = CostModel(1e-4, 0.6e-4)
    requests = pevsched.check.random_instance(seed, max_requests=10)
    decomp = pevsched.model.decompose_intervals(requests)
    rng = np.random.default_rng(seed)
    rates = {
        (r.id, k): float(rng.uniform(0.0, r.max_rate))
        for r in requests for k in decomp.spans[r.id]}
    schedule = RateSchedule(decomp, rates)

    first, last = decomp.boundaries[0].value, decomp.boundaries[-1].value
    cuts = [TimeStamp(int(t)) for t in rng.integers(first + 1, last, size=5)]
    finer = refined(schedule, requests, cuts)
    assert len(finer.decomposition) >= len(decomp)
    assert pevsched.model.evaluate_cost(
        finer, finer.decomposition, cost) == pytest.approx(
            pevsched.model.evaluate_cost(schedule, decomp, cost), rel=1e-12)
    for r in requests:
        assert finer.delivered(r.id) == pytest.approx(schedule.delivered(r.id))

@pytest.mark.parametrize('seed', range(10))
def test_evaluate_cost_monotone(seed):
    """
    Raising any rate never lowers the cost.
    """
    cost = CostModel()
    requests = pevsched.check.random_instance(seed, max_requests=10)
    decomp = pevsched.model.decompose_intervals(requests)
    rng = np.random.default_rng(seed)
    rates = {
        (r.id, k): float(rng.uniform(0.0, r.max_rate))
        for r in requests for k in decomp.spans[r.id]}
    before = pevsched.model.evaluate_cost(
        RateSchedule(decomp, rates), decomp, cost)
    for key in sorted(rates)[:5]:
        rates[key] += 0.5
        after = pevsched.model.evaluate_cost(
            RateSchedule(decomp, rates), decomp, cost)
        assert after > before
        before = after

def test_evaluate_cost_mismatch(one_pev):
    _, decomp = one_pev
    schedule = RateSchedule(decomp, {(1, 0): 1.0})
    other = pevsched.model.decompose_intervals(
        [request(1, 0, 4, 4.0)], extra_boundaries=[TimeStamp.from_hours(1)])
    with pytest.raises(ScheduleMismatchError):
        pevsched.model.evaluate_cost(schedule, other, CostModel())

def test_cost_model_validation():
    assert CostModel() == (1e-4, 0.6e-4)
    with pytest.raises(ModelError):
        CostModel(1e-4, 0.0)
    with pytest.raises(ModelError):
        CostModel(-1.0, 1e-4)
    assert np.allclose(
        CostModel(1.0, 2.0).rate_cost(np.array([0.0, 1.0, 2.0])),
        [0.0, 3.0, 10.0])

def test_validate_schedule(one_pev):
    requests, decomp = one_pev

    report = pevsched.model.validate_schedule(
        RateSchedule(decomp, {(1, 0): 1.0}), requests, decomp)
    assert report.feasible
    assert report.checks[0].delivered == pytest.approx(4.0)

    report = pevsched.model.validate_schedule(
        RateSchedule(decomp, {(1, 0): 0.9}), requests, decomp)
    assert not report.feasible
    assert report.max_shortfall == pytest.approx(0.4)
    assert report.flagged[0].id == 1
    assert "request 1" in str(report)

    report = pevsched.model.validate_schedule(
        RateSchedule(decomp, {(1, 0): 3.4}), requests, decomp)
    assert not report.feasible
    assert report.checks[0].short == False
    assert report.checks[0].rate_violation == pytest.approx(0.1)

def test_validate_unknown_request(one_pev):
    _, decomp = one_pev
    with pytest.raises(ScheduleMismatchError):
        pevsched.model.validate_schedule(
            RateSchedule(decomp, {}), [request(2, 0, 4, 1.0)], decomp)

def write(tmp_path, text, name="instance.json"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)

def test_load_instance(tmp_path):
    path = write(tmp_path, json.dumps({
        "cost": {"a": 2e-4, "b": 1e-4},
        "requests": [
            {"id": 3, "arrival_h": 0.5, "deadline_h": 2.25,
             "demand_kwh": 1.5, "max_rate_kw": 1.4, "capacity_kwh": 16}]}))
    cost, requests = pevsched.model.load_instance(path)
    assert cost == CostModel(2e-4, 1e-4)
    assert requests == [request(3, 0.5, 2.25, 1.5, 1.4, 16.0)]
    assert requests[0].arrival == TimeStamp(500)

def test_load_instance_default_cost(tmp_path):
    path = write(tmp_path, json.dumps({"requests": []}))
    cost, requests = pevsched.model.load_instance(path)
    assert cost == CostModel()
    assert requests == []

def test_dump_and_load(tmp_path):
    requests = [request(1, 0, 4, 4.0), request(2, 1.25, 3, 1.0, 1.4, 16.0)]
    path = str(tmp_path / "out.json")
    pevsched.model.dump_instance(path, CostModel(), requests)
    cost, loaded = pevsched.model.load_instance(path)
    assert cost == CostModel()
    assert loaded == requests

def test_load_instance_bad_json(tmp_path):
    path = write(tmp_path, '{"requests": [\n  {"id": 1,}\n]}')
    with pytest.raises(InstanceFormatError) as e:
        pevsched.model.load_instance(path)
    assert "line 2" in str(e.value)

@pytest.mark.parametrize('document, message', [
    ([], "top level must be an object"),
    ({"requests": {}}, "'requests' must be a list"),
    ({"requests": [{"id": 1}]}, "missing field 'arrival_h'"),
    ({"requests": [{"id": 1, "arrival_h": "x"}]},
        "field 'arrival_h' must be a number"),
    ({"requests": [{"id": 1, "arrival_h": 2, "deadline_h": 1,
        "demand_kwh": 1, "max_rate_kw": 1, "capacity_kwh": 1}]},
        "not before deadline"),
    ({"cost": {"a": 1e-4, "b": 0}, "requests": []}, "cost"),
])
def test_load_instance_bad_fields(tmp_path, document, message):
    path = write(tmp_path, json.dumps(document))
    with pytest.raises(InstanceFormatError) as e:
        pevsched.model.load_instance(path)
    assert message in str(e.value)
