import pytest
import numpy as np

import pevsched.online
from pevsched.model import (
    ChargingRequest, CostModel, InfeasibleRequestError, TimeStamp,
    evaluate_cost, validate_schedule)
from pevsched.offline import OfflineSolver
from pevsched.online import (
    AlgorithmKind, OnlineEngine, OnlineState, AccountingFault,
    FeasibilityFault, ARRIVAL, FINISHED, DEPARTURE)

def request(id, arrival_h, deadline_h, demand, max_rate=3.3, capacity=35.0):
    return ChargingRequest.from_hours(
        id, arrival_h, deadline_h, demand, max_rate, capacity)

def state_at(now_h, requests, residuals=None):
    """
    OnlineState with ``requests`` parked at ``now_h``.
    """
    state = OnlineState(TimeStamp.from_hours(now_h))
    for r in requests:
        state.requests[r.id] = r
        state.residual[r.id] = r.demand
        state.present.add(r.id)
    for request_id, residual in (residuals or {}).items():
        state.residual[request_id] = residual
    return state

def offline_cost(requests, cost):
    solver = OfflineSolver()
    schedule = solver.solve(requests)
    return evaluate_cost(schedule, solver.decomposition, cost)

@pytest.fixture
def cost():
    return CostModel()

@pytest.fixture
def late_arrival():
    """
    PEV 2 plugs in while PEV 1 is half way through its stay.
    """
    return [
        request(1, 0, 4, 6.0, max_rate=3.3),
        request(2, 2, 5, 4.0, max_rate=3.3)]

def test_algorithm_kind():
    assert AlgorithmKind.orchard().q == 1.46
    assert AlgorithmKind.oa().q == 1.0
    assert AlgorithmKind.parse('EG', q=3.0) == AlgorithmKind.eg()
    assert AlgorithmKind.parse('orchard', q=2.1) == AlgorithmKind.orchard(2.1)
    assert AlgorithmKind.orchard(2.1) != AlgorithmKind.orchard(1.46)
    assert len(set([AlgorithmKind.oa(), AlgorithmKind('oa')])) == 1
    assert str(AlgorithmKind.orchard(1.46)) == "orchard(q=1.46)"
    assert AlgorithmKind.oa().resolves
    assert not AlgorithmKind.avg().resolves

    with pytest.raises(ValueError):
        AlgorithmKind('greedy')
    with pytest.raises(ValueError):
        AlgorithmKind.orchard(0.5)

def test_event_order():
    t = TimeStamp(1000)
    events = [
        pevsched.online.OnlineEvent(t, DEPARTURE, 1),
        pevsched.online.OnlineEvent(t, FINISHED, 3),
        pevsched.online.OnlineEvent(t, ARRIVAL, 2),
        pevsched.online.OnlineEvent(TimeStamp(500), DEPARTURE, 4)]
    events.sort(key=pevsched.online.OnlineEvent.sort_key)
    assert [e.request_id for e in events] == [4, 2, 3, 1]

def test_oa_rates():
    state = state_at(0, [request(1, 0, 4, 4.0)])
    assert pevsched.online.oa_rates(state) == {1: pytest.approx(1.0)}

    state = state_at(0, [
        request(1, 0, 2, 2.0, max_rate=2.0),
        request(2, 0, 4, 4.0, max_rate=2.0)])
    assert pevsched.online.oa_rates(state) == {
        1: pytest.approx(1.0), 2: pytest.approx(0.5)}

def test_oa_rates_deadline_pressure():
    state = state_at(1, [request(1, 0, 4, 9.9)], {1: 9.9})
    assert pevsched.online.oa_rates(state) == {1: pytest.approx(3.3)}

def test_oa_rates_infeasible_residual():
    state = state_at(2, [request(1, 0, 4, 9.0)], {1: 9.0})
    with pytest.raises(FeasibilityFault):
        pevsched.online.oa_rates(state)

def test_orchard_rates():
    rates = pevsched.online.orchard_rates([1.0], [3.3], q=1.46)
    assert np.allclose(rates, [1.46])

    rates = pevsched.online.orchard_rates([1.0, 1.0], [2.0, 4.0], q=1.46)
    assert np.allclose(rates, [1.23, 1.69])
    assert rates.sum() == pytest.approx(2.92)

def test_orchard_rates_saturated():
    rates = pevsched.online.orchard_rates([2.0, 4.0], [2.0, 4.0], q=1.46)
    assert np.allclose(rates, [2.0, 4.0])

    # Total capped by the sum of max rates.
    rates = pevsched.online.orchard_rates([1.5, 3.0], [2.0, 4.0], q=2.0)
    assert np.allclose(rates, [2.0, 4.0])

def test_orchard_rates_redistributes_clipped():
    oa = np.array([0.1, 1.0, 0.2])
    caps = np.array([0.2, 3.3, 1.4])
    rates = pevsched.online.orchard_rates(oa, caps, q=2.5)
    assert rates.sum() == pytest.approx(min(2.5 * oa.sum(), caps.sum()))
    assert np.all(rates >= oa)
    assert np.all(rates <= caps)

def test_orchard_rates_identity():
    oa = np.array([0.3, 1.2])
    rates = pevsched.online.orchard_rates(oa, [1.4, 3.3], q=1.0)
    assert np.all(rates == oa)
    assert rates is not oa

@pytest.mark.parametrize('demand, deadline_h, expected', [
    (4.0, 4, 1.0),
    (13.0, 4, 3.25),
    (0.0, 4, 0.0)])
def test_avg_rates(demand, deadline_h, expected):
    rates = pevsched.online.avg_rates([request(1, 0, deadline_h, demand)])
    assert rates == {1: pytest.approx(expected)}

def test_eg_rates():
    state = state_at(0, [
        request(1, 0, 4, 3.0, max_rate=2.0),
        request(2, 0, 4, 1.0, max_rate=1.4)])
    assert pevsched.online.eg_rates(state) == {1: 2.0, 2: 1.4}

    state.residual[2] = 0.0
    assert pevsched.online.eg_rates(state) == {1: 2.0, 2: 0.0}

def test_update_residuals():
    state = state_at(0, [
        request(1, 0, 4, 5.0, max_rate=2.0),
        request(2, 0, 4, 3.0, max_rate=2.0)])
    pevsched.online.update_residuals(state, 1.5, {1: 2.0, 2: 2.0})
    assert state.residual[1] == pytest.approx(2.0)
    assert state.residual[2] == 0.0
    assert state.present == {1}
    assert state.finished == [2]

def test_update_residuals_over_delivery():
    state = state_at(0, [request(1, 0, 4, 1.0)])
    with pytest.raises(AccountingFault):
        pevsched.online.update_residuals(state, 1.0, {1: 2.0})

def test_arrive():
    state = OnlineState(TimeStamp(0))
    state.arrive(request(1, 0, 4, 4.0))
    state.arrive(request(2, 0, 4, 0.0))
    assert state.residual == {1: 4.0, 2: 0.0}
    assert state.present == {1}

def test_eg_finishes_early(cost):
    result = OnlineEngine(
        [request(1, 0, 4, 3.0, max_rate=2.0)], cost, AlgorithmKind.eg()).run()
    assert result.trace[0].start == TimeStamp(0)
    assert result.trace[0].end == TimeStamp.from_hours(1.5)
    assert result.trace[0].rates == {1: 2.0}
    assert [(e.kind, e.time.hours) for e in result.events] == [
        (ARRIVAL, 0.0), (FINISHED, 1.5), (DEPARTURE, 4.0)]
    assert result.cost == pytest.approx(1.5 * cost.rate_cost(2.0))

def test_departure_event(cost):
    requests = [request(1, 0, 2, 2.0, max_rate=2.0), request(2, 1, 3, 1.0)]
    result = OnlineEngine(requests, cost, AlgorithmKind.avg()).run()
    departures = [
        (e.time.hours, e.request_id) for e in result.events
        if e.kind == DEPARTURE]
    assert departures == [(2.0, 1), (3.0, 2)]

@pytest.mark.parametrize('algorithm', [
    AlgorithmKind.oa(), AlgorithmKind.orchard(), AlgorithmKind.avg(),
    AlgorithmKind.eg()])
def test_every_pev_finishes_and_departs(cost, late_arrival, algorithm):
    result = OnlineEngine(late_arrival, cost, algorithm).run()
    for kind in (ARRIVAL, FINISHED, DEPARTURE):
        assert sorted(
            e.request_id for e in result.events if e.kind == kind) == [1, 2]
    times = [e.sort_key() for e in result.events]
    assert times == sorted(times)
    departures = {
        e.request_id: e.time for e in result.events if e.kind == DEPARTURE}
    assert departures == {r.id: r.deadline for r in late_arrival}

def test_infeasible_request_is_seen_on_arrival(cost):
    """
    The engine only judges a request once it has arrived, so the first
    PEV is still served before the bad one shows up.
    """
    requests = [request(1, 0, 4, 2.0), request(2, 2, 3, 5.0, max_rate=1.0)]
    engine = OnlineEngine(requests, cost, AlgorithmKind.orchard())
    with pytest.raises(FeasibilityFault) as e:
        engine.run()
    assert "request 2" in str(e.value)

def test_run_online_rejects_infeasible(cost):
    requests = [request(1, 0, 4, 2.0), request(2, 2, 3, 5.0, max_rate=1.0)]
    with pytest.raises(InfeasibleRequestError) as e:
        pevsched.online.run_online(requests, cost, AlgorithmKind.oa())
    assert e.value.ids == [2]

@pytest.mark.parametrize('algorithm', [
    AlgorithmKind.oa(), AlgorithmKind.orchard(1.0), AlgorithmKind.avg()])
def test_single_pev_is_optimal(cost, algorithm):
    requests = [request(1, 0, 4, 4.0)]
    schedule, total = pevsched.online.run_online(requests, cost, algorithm)
    assert total == pytest.approx(offline_cost(requests, cost))

@pytest.mark.parametrize('algorithm', [
    AlgorithmKind.oa(), AlgorithmKind.orchard(), AlgorithmKind.avg(),
    AlgorithmKind.eg()])
def test_late_arrival(cost, late_arrival, algorithm):
    result = OnlineEngine(late_arrival, cost, algorithm).run()
    report = validate_schedule(
        result.schedule, late_arrival, result.decomposition)
    assert report.feasible
    assert result.cost >= offline_cost(late_arrival, cost) - 1e-9
    assert result.cost == pytest.approx(evaluate_cost(
        result.schedule, result.decomposition, cost))

def test_orchard_dominates_oa(cost, late_arrival):
    result = OnlineEngine(late_arrival, cost, AlgorithmKind.orchard()).run()
    assert result.decisions
    for decision in result.decisions:
        for request_id, rate in decision.oa.items():
            assert decision.rates[request_id] >= rate - 1e-12

def test_orchard_identity(cost, late_arrival):
    oa = OnlineEngine(late_arrival, cost, AlgorithmKind.oa()).run()
    plain = OnlineEngine(late_arrival, cost, AlgorithmKind.orchard(1.0)).run()
    assert [(s.start, s.end, s.rates) for s in oa.trace] == [
        (s.start, s.end, s.rates) for s in plain.trace]
    assert oa.cost == plain.cost

def test_decisions_are_causal(cost, late_arrival):
    """
    Changing a PEV that has not arrived yet does not change what was
    decided before it arrives.
    """
    other = [late_arrival[0], late_arrival[1]._replace(demand=1.0)]
    first = OnlineEngine(late_arrival, cost, AlgorithmKind.orchard()).run()
    second = OnlineEngine(other, cost, AlgorithmKind.orchard()).run()
    arrival = late_arrival[1].arrival
    before = lambda result: [
        (d.time, d.rates) for d in result.decisions if d.time < arrival]
    assert before(first)
    assert before(first) == before(second)

def test_resolves_only_on_arrival_or_finish(cost):
    requests = [
        request(1, 0, 1, 1.0, max_rate=2.0),
        request(2, 0, 3, 2.0, max_rate=2.0)]
    result = OnlineEngine(requests, cost, AlgorithmKind.oa()).run()
    kinds = {(e.time, e.kind) for e in result.events}
    for decision in result.decisions:
        assert (decision.time, ARRIVAL) in kinds or (
            decision.time, FINISHED) in kinds

def test_idle_span(cost):
    requests = [request(1, 0, 1, 1.0), request(2, 3, 4, 1.0)]
    result = OnlineEngine(requests, cost, AlgorithmKind.oa()).run()
    idle = [s for s in result.trace if not s.rates]
    assert [(s.start.hours, s.end.hours) for s in idle] == [(1.0, 3.0)]
    assert result.cost == pytest.approx(offline_cost(requests, cost))

def test_empty_instance(cost):
    result = OnlineEngine([], cost, AlgorithmKind.orchard()).run()
    assert result.cost == 0.0
    assert result.trace == []

def test_zero_demand(cost):
    result = OnlineEngine(
        [request(1, 0, 4, 0.0)], cost, AlgorithmKind.orchard()).run()
    assert result.cost == 0.0
    assert result.decisions == []
