"""
Online charging: rates are decided as PEVs arrive, with no knowledge of
future arrivals.

``OnlineEngine`` walks the events of an instance in time order. Between
two events every parked PEV charges at a constant rate chosen by the
algorithm:

* ``oa``: solve the offline problem for the PEVs present, assuming nobody
  else arrives, and use the first interval's rates.
* ``orchard``: OA scaled up by a speed-up factor q, capped at the sum of
  the max rates and shared out by headroom.
* ``avg``: D / parking time, fixed for the whole stay.
* ``eg``: full rate until done.

OA and ORCHARD re-decide on every arrival and every finish. A PEV's finish
is projected onto the milli-hour grid, rounded up, and the PEV is
throttled so it delivers exactly its residual demand by then.
::

    result = OnlineEngine(requests, CostModel(), AlgorithmKind.orchard()).run()
    result.cost
    result.decisions[0]     # Decision(time, oa={...}, rates={...})
"""
import math
import heapq
import logging
import collections

import numpy as np

from pevsched.model import (
    MILLIHOURS, DEMAND_TOL, RATE_TOL, ChargingRequest, RateSchedule, TimeStamp,
    check_request_feasible, decompose_intervals, evaluate_cost,
    reject_infeasible)
from pevsched.offline import OfflineSolver

# Speed-up factor with the best proven worst case.
DEFAULT_Q = 1.46

ALGORITHMS = ('oa', 'orchard', 'avg', 'eg')

class EngineFault(Exception):
    """
    Base error of the online engine. These indicate a bug, feasible
    instances never raise them.
    """
    pass

class FeasibilityFault(EngineFault):
    """
    A PEV present at a decision point can no longer be served in time.
    """
    pass

class AccountingFault(EngineFault):
    """
    A residual demand went negative.
    """
    pass

class DeadlineMissed(EngineFault):
    """
    A PEV left with energy still owed.
    """
    def __init__(self, request_id, time, residual):
        self.request_id = request_id
        self.time = time
        self.residual = residual
        super().__init__("request {} left at {} owed {:.9f} kWh".format(
            request_id, time, residual))

class AlgorithmKind():
    """
    Online algorithm and its speed-up factor. Only ORCHARD uses ``q``.
    ::

        AlgorithmKind.orchard(2.1)
        AlgorithmKind.parse('avg')
    """
    def __init__(self, name, q=1.0):
        name = name.lower()
        if name not in ALGORITHMS:
            raise ValueError("unknown algorithm '{}', expected one of {}".format(
                name, ", ".join(ALGORITHMS)))
        if q < 1:
            raise ValueError("speed-up factor q must be >= 1, got {}".format(q))
        self.name = name
        self.q = float(q) if name == 'orchard' else 1.0

    @classmethod
    def oa(cls):
        return cls('oa')

    @classmethod
    def orchard(cls, q=DEFAULT_Q):
        return cls('orchard', q)

    @classmethod
    def avg(cls):
        return cls('avg')

    @classmethod
    def eg(cls):
        return cls('eg')

    @classmethod
    def parse(cls, name, q=DEFAULT_Q):
        return cls(name, q)

    @property
    def resolves(self):
        """ True for algorithms that re-decide at every event. """
        return self.name in ('oa', 'orchard')

    def __eq__(self, other):
        if not isinstance(other, AlgorithmKind):
            return NotImplemented
        return (self.name, self.q) == (other.name, other.q)

    def __hash__(self):
        return hash((self.name, self.q))

    def __str__(self):
        if self.name == 'orchard':
            return "orchard(q={:g})".format(self.q)
        return self.name

    def __repr__(self):
        return "AlgorithmKind({!r}, q={})".format(self.name, self.q)

ARRIVAL = 'arrival'
FINISHED = 'finished'
DEPARTURE = 'departure'
_EVENT_ORDER = {ARRIVAL: 0, FINISHED: 1, DEPARTURE: 2}

class OnlineEvent(collections.namedtuple(
        "OnlineEvent", ["time", "kind", "request_id"])):
    """
    Something that happened to one PEV at one instant.
    """
    __slots__ = ()

    def sort_key(self):
        return (self.time.value, _EVENT_ORDER[self.kind], self.request_id)

ExecutedSpan = collections.namedtuple(
    "ExecutedSpan", ["start", "end", "rates"])

Decision = collections.namedtuple("Decision", ["time", "oa", "rates"])

class OnlineState():
    """
    What the engine knows at time ``now``.

    :param now: Current TimeStamp.
    """
    def __init__(self, now):
        self.now = now
        self.requests = {}
        self.present = set()
        self.residual = {}
        self.executed = []
        self.finished = []

    def arrive(self, request):
        """
        Register a PEV that plugged in at ``now``.

        :raises FeasibilityFault: The PEV asks for more than it can take.
        """
        assert request.arrival == self.now, (
            "request {} arrives at {}, not {}".format(
                request.id, request.arrival, self.now))
        if not check_request_feasible(request):
            raise FeasibilityFault(
                "request {} asks {:.9f} kWh but can take {:.9f} kWh".format(
                    request.id, request.demand, request.max_energy))
        self.requests[request.id] = request
        self.residual[request.id] = request.demand
        if request.demand > DEMAND_TOL:
            self.present.add(request.id)
        else:
            self.residual[request.id] = 0.0

    def present_requests(self):
        return [self.requests[i] for i in sorted(self.present)]

def oa_rates(state, solver=None):
    """
    Rates of the first interval of the offline optimum of the PEVs
    present, each with window [now, deadline] and its residual demand.

    :param solver: OfflineSolver to use, a fresh one by default.
    :returns: Dict of request id -> rate (kW).
    :raises FeasibilityFault: A residual exceeds what the PEV can still take.
    """
    solver = solver or OfflineSolver()
    snapshot = []
    for request in state.present_requests():
        residual = state.residual[request.id]
        reachable = request.max_rate * (request.deadline - state.now) / MILLIHOURS
        if residual > reachable + DEMAND_TOL:
            raise FeasibilityFault(
                "request {} owes {:.9f} kWh but can take {:.9f} kWh".format(
                    request.id, residual, reachable))
        snapshot.append(ChargingRequest(
            request.id, state.now, request.deadline, min(residual, reachable),
            request.max_rate, max(request.capacity, residual)))
    return solver.first_rates(snapshot, state.now)

def orchard_rates(oa, caps, q=DEFAULT_Q):
    """
    Speed OA's rates up by ``q``.

    The total becomes min{q * sum(oa), sum(caps)}. The extra is shared out
    in proportion to each PEV's headroom caps - oa, and whatever the caps
    clip off is handed to the PEVs that still have room.

    :param oa: OA rates (kW).
    :param caps: Max rates (kW), same order.
    :returns: Array of rates, each between its OA rate and its cap.
    """
    oa = np.asarray(oa, dtype=float)
    caps = np.asarray(caps, dtype=float)
    assert q >= 1, "q must be >= 1"
    if q == 1:
        return oa.copy()

    target = min(q * oa.sum(), caps.sum())
    headroom = caps - oa
    if headroom.sum() <= 0:
        return caps.copy()

    rates = np.minimum(
        oa + headroom / headroom.sum() * (q - 1) / q * target, caps)
    for _ in range(len(rates)):
        short = target - rates.sum()
        room = caps - rates
        if short <= RATE_TOL * max(1.0, target) or room.sum() <= 0:
            break
        rates = np.minimum(rates + room / room.sum() * short, caps)
    return rates

def avg_rates(requests_present):
    """
    Every PEV charges at D / parking time for its whole stay.
    """
    return {
        request.id: request.demand / request.window
        for request in requests_present}

def eg_rates(state):
    """
    Every PEV charges at its max rate until it is done.
    """
    return {
        request_id: (
            state.requests[request_id].max_rate
            if state.residual[request_id] > DEMAND_TOL else 0.0)
        for request_id in state.present}

def update_residuals(state, elapsed, rates):
    """
    Charge every present PEV at ``rates`` for ``elapsed`` hours. PEVs that
    reach zero residual leave ``present`` and are listed in
    ``state.finished``.

    :returns: The state.
    :raises AccountingFault: A residual would drop below zero by more than
        the demand tolerance.
    """
    state.finished = []
    for request_id in sorted(state.present):
        residual = state.residual[request_id] - rates.get(request_id, 0.0) * elapsed
        if residual < -DEMAND_TOL:
            raise AccountingFault(
                "request {} over-delivered by {:.9f} kWh".format(
                    request_id, -residual))
        if residual <= DEMAND_TOL:
            residual = 0.0
            state.present.discard(request_id)
            state.finished.append(request_id)
        state.residual[request_id] = residual
    return state

def _departures(state, deadlines, until):
    """
    Pop the deadlines up to ``until`` (milli-hours, None for all of them)
    off the heap as DEPARTURE events at their own time.

    :raises DeadlineMissed: A departing PEV still owes energy.
    """
    happened = []
    while deadlines and (until is None or deadlines[0][0] <= until):
        value, request_id = heapq.heappop(deadlines)
        residual = state.residual[request_id]
        if residual > DEMAND_TOL:
            raise DeadlineMissed(request_id, TimeStamp(value), residual)
        happened.append(OnlineEvent(TimeStamp(value), DEPARTURE, request_id))
    return happened

class OnlineResult():
    """
    Outcome of one online run.

    :param algorithm: AlgorithmKind that was run.
    :param schedule: Executed RateSchedule.
    :param decomposition: Intervals of ``schedule``, cut at every event.
    :param cost: Generation cost of the executed schedule ($).
    :param trace: List of ExecutedSpan, idle spans included.
    :param decisions: List of Decision, one per re-decision of OA/ORCHARD.
    """
    def __init__(self, algorithm, schedule, decomposition, cost, trace,
            decisions, events):
        self.algorithm = algorithm
        self.schedule = schedule
        self.decomposition = decomposition
        self.cost = cost
        self.trace = trace
        self.decisions = decisions
        self.events = events

    def __str__(self):
        return "{}: cost {:.6g} $, {} spans, {} decisions".format(
            self.algorithm, self.cost, len(self.trace), len(self.decisions))

class OnlineEngine():
    """
    Event loop for one run of one algorithm on one instance. Requests are
    only looked at once the clock reaches their arrival, so an infeasible
    request surfaces as an EngineFault when it is first acted on. Callers
    that want it rejected up front use ``reject_infeasible()``.

    :param requests: Charging requests of the instance.
    :param cost: CostModel of the executed schedule.
    :param algorithm: AlgorithmKind.
    :param solver: OfflineSolver used by OA/ORCHARD snapshots.
    """
    def __init__(self, requests, cost, algorithm, solver=None):
        self.requests = sorted(requests, key=lambda r: (r.arrival, r.id))
        self.cost = cost
        self.algorithm = algorithm
        self.solver = solver or OfflineSolver()

    def _decide(self, state, decisions):
        logger = logging.getLogger('pevsched.online.rates')
        if self.algorithm.name == 'avg':
            return avg_rates(state.present_requests())
        if self.algorithm.name == 'eg':
            return eg_rates(state)

        oa = oa_rates(state, self.solver)
        ids = sorted(oa)
        if self.algorithm.name == 'orchard':
            caps = [state.requests[i].max_rate for i in ids]
            speeded = orchard_rates([oa[i] for i in ids], caps, self.algorithm.q)
            rates = {i: float(rate) for i, rate in zip(ids, speeded)}
        else:
            rates = dict(oa)
        decisions.append(Decision(state.now, oa, rates))
        logger.debug("{} at {}: {}".format(
            self.algorithm, state.now,
            ", ".join("{}={:.4f}".format(i, rates[i]) for i in ids)))
        return rates

    def _span_end(self, state, rates, next_arrival):
        """
        Earliest of the next arrival, a projected finish and a deadline.
        """
        candidates = []
        if next_arrival is not None:
            candidates.append(next_arrival.value)
        for request_id in state.present:
            request = state.requests[request_id]
            candidates.append(request.deadline.value)
            rate = rates.get(request_id, 0.0)
            if rate > 0:
                steps = math.ceil(
                    state.residual[request_id] / rate * MILLIHOURS - 1e-9)
                candidates.append(min(
                    state.now.value + max(1, steps), request.deadline.value))
        return min(candidates)

    def _execute(self, state, rates, end):
        """
        Rates actually held over [now, end]. PEVs that would finish before
        ``end`` are slowed so they finish exactly at ``end``; a PEV whose
        deadline is ``end`` is topped up to absorb rounding.
        """
        hours = (end - state.now.value) / MILLIHOURS
        executed = {}
        for request_id in sorted(state.present):
            request = state.requests[request_id]
            residual = state.residual[request_id]
            rate = min(rates.get(request_id, 0.0), residual / hours)
            if request.deadline.value == end and residual - rate * hours > 0:
                if residual - rate * hours <= DEMAND_TOL * max(1.0, residual):
                    rate = min(request.max_rate, residual / hours)
            if rate > 0:
                executed[request_id] = rate
        return executed

    def run(self):
        """
        Play the whole instance.

        :returns: OnlineResult.
        :raises DeadlineMissed: A PEV left with demand unmet.
        """
        event_log = logging.getLogger('pevsched.online.event')
        pending = collections.deque(self.requests)
        trace = []
        decisions = []
        events = []
        if not pending:
            decomp = decompose_intervals([])
            return OnlineResult(
                self.algorithm, RateSchedule(decomp, {}), decomp, 0.0, trace,
                decisions, events)

        state = OnlineState(pending[0].arrival)
        deadlines = []
        rates = {}
        while True:
            now = state.now
            happened = []
            while pending and pending[0].arrival == now:
                request = pending.popleft()
                state.arrive(request)
                heapq.heappush(deadlines, (request.deadline.value, request.id))
                happened.append(OnlineEvent(now, ARRIVAL, request.id))
            for request_id in state.finished:
                happened.append(OnlineEvent(now, FINISHED, request_id))
            state.finished = []
            happened.extend(_departures(state, deadlines, now.value))
            if not pending and not state.present:
                # Whoever is still parked has finished and leaves on time.
                happened.extend(_departures(state, deadlines, None))
            happened.sort(key=OnlineEvent.sort_key)
            for event in happened:
                event_log.debug("{} {} {}".format(
                    event.time, event.kind, event.request_id))
            events.extend(happened)

            next_arrival = pending[0].arrival if pending else None
            if not state.present:
                if next_arrival is None:
                    break
                trace.append(ExecutedSpan(now, next_arrival, {}))
                state.now = next_arrival
                continue

            resolve = any(e.kind in (ARRIVAL, FINISHED) for e in happened)
            if resolve or not self.algorithm.resolves:
                rates = self._decide(state, decisions)

            end = self._span_end(state, rates, next_arrival)
            executed = self._execute(state, rates, end)
            update_residuals(state, (end - now.value) / MILLIHOURS, executed)
            span = ExecutedSpan(now, TimeStamp(end), executed)
            trace.append(span)
            state.executed.append(span)
            state.now = span.end

        leftover = {
            i: r for i, r in state.residual.items() if r > DEMAND_TOL}
        if leftover:
            request_id = min(leftover)
            raise DeadlineMissed(
                request_id, state.requests[request_id].deadline,
                leftover[request_id])

        decomp = decompose_intervals(
            self.requests,
            extra_boundaries=[s.start for s in trace] + [s.end for s in trace])
        index = {t: k for k, t in enumerate(decomp.boundaries)}
        schedule_rates = {}
        for span in trace:
            for k in range(index[span.start], index[span.end]):
                for request_id, rate in span.rates.items():
                    schedule_rates[(request_id, k)] = rate
        schedule = RateSchedule(decomp, schedule_rates)
        cost = evaluate_cost(schedule, decomp, self.cost)

        logger = logging.getLogger('pevsched.online.run')
        logger.debug("{} done: {} requests, cost {:.6g} $".format(
            self.algorithm, len(self.requests), cost))
        return OnlineResult(
            self.algorithm, schedule, decomp, cost, trace, decisions, events)

def run_online(requests, cost, algo):
    """
    Run one online algorithm on an instance known in full.

    :returns: (executed RateSchedule, total cost in $).
    :raises InfeasibleRequestError: A request cannot be served.
    """
    requests = list(requests)
    reject_infeasible(requests)
    result = OnlineEngine(requests, cost, algo).run()
    return result.schedule, result.cost
