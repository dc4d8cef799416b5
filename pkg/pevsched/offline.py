"""
Offline optimal charging schedule.

The optimal total rate of every interval is found first: each part of
the timeline is cut by a max-flow at its mean rate into the intervals
that end up above the mean and those below, until every part is level.
The levels are then frozen from the top down: every request forced to
charge on a level is scheduled there and at full rate on the lower
intervals it still spans. The peak rates come out non-increasing and the
final schedule satisfies the KKT conditions of the convex problem, so it
is globally optimal.

Two slower peelings remain as fallbacks, each picking the densest set
(the peak set) one at a time: a quick search over the intensity ordered
prefixes of every time window, and a certified one that improves a
candidate with min-cuts until none is denser.

Two helpers check the result independently. ``verify_kkt()`` tests the
optimality conditions directly, ``oracle_solve()`` reaches the optimum by
a completely different route (block coordinate descent with exact
water-filling per request).
::

    requests = [
        ChargingRequest.from_hours(1, 0, 2, 2.0, 2.0, 35),
        ChargingRequest.from_hours(2, 0, 4, 4.0, 2.0, 35)]
    schedule = solve_offline(requests, CostModel())
    schedule.totals     # [1.5, 1.5]
"""
import logging

import numpy as np
import networkx as nx
from networkx.algorithms.flow import preflow_push

from pevsched.model import (
    RateSchedule, RATE_TOL, decompose_intervals, evaluate_cost,
    reject_infeasible, validate_schedule)

# Tolerance of the KKT verifier (kW).
KKT_TOL = 1e-6

# Oracle convergence tolerance (kW) and pass limit.
ORACLE_TOL = 1e-7
ORACLE_MAX_PASSES = 10**6

# Relative tolerance when comparing balanced rates for ties.
TIE_EPS = 1e-12

# Rates closer than this are one level; a later peak may exceed an
# earlier one by this much (kW).
PEAK_TOL = 1e-7

# Limit on densest set refinements in one certified iteration.
MAX_REFINEMENTS = 200

# Flow capacities are whole multiples of this energy (kWh).
FLOW_QUANTUM = 1e-12
SOURCE = 0
SINK = 1

class SolverError(Exception):
    """
    Base error of the offline solver. Apart from SolverDomainError these
    signal a bug rather than bad input.
    """
    pass

class SolverDomainError(SolverError):
    """
    A function was called outside its domain, eg. the residual demand of
    a request that does not overlap the interval set.
    """
    pass

class AllocationError(SolverError):
    """
    The rates of a peak set could not be allocated inside [0, U].
    """
    pass

class PeakOrderError(SolverError):
    """
    A later peak rate exceeded an earlier one.
    """
    pass

class NoActiveIntervals(SolverError):
    """
    Raised by select_peak_set() when every interval is frozen.
    """
    pass

class OracleConvergenceError(SolverError):
    """
    The oracle hit its pass limit.

    :param violation: Remaining KKT gap (kW) when it gave up.
    """
    def __init__(self, violation, passes):
        self.violation = violation
        self.passes = passes
        super().__init__(
            "Oracle did not converge after {} passes, violation {:.3g} kW".format(
                passes, violation))

class IntervalSet():
    """
    Candidate peak set.

    :param window: (first, last + 1) interval index of the time window
        the members were chosen from.
    :param members: Sorted interval indices of the set.
    :param total_length: Sum of the members' lengths in hours.
    """
    def __init__(self, window, members, total_length):
        self.window = tuple(window)
        self.members = tuple(sorted(members))
        self.total_length = float(total_length)
        assert self.members, "An interval set needs at least one member."
        assert self.total_length > 0, "An interval set needs a length."

    def __contains__(self, k):
        return k in self.members

    def __len__(self):
        return len(self.members)

    def __repr__(self):
        return "IntervalSet(window={}, members={}, length={:.3f}h)".format(
            self.window, self.members, self.total_length)

class KktReport():
    """
    Worst violation of each optimality condition over all requests.

    :param balance: Spread of totals over intervals where a request
        charges strictly between 0 and U.
    :param zero_rate: How far an interval where a request does not charge
        sits below an interval where it does.
    :param cap_rate: How far an interval where a request charges at U
        sits above an interval where it charges below U.
    """
    def __init__(self, balance, zero_rate, cap_rate, tol):
        self.max_balance_violation = balance
        self.max_zero_rate_violation = zero_rate
        self.max_cap_rate_violation = cap_rate
        self.tol = tol

    @property
    def passed(self):
        return self.worst <= self.tol

    @property
    def worst(self):
        return max(
            self.max_balance_violation, self.max_zero_rate_violation,
            self.max_cap_rate_violation)

    def __str__(self):
        return (
            "KKT {}: balance {:.3g}, zero-rate {:.3g}, cap-rate {:.3g} kW "
            "(tol {:.1g})".format(
                "passed" if self.passed else "FAILED",
                self.max_balance_violation, self.max_zero_rate_violation,
                self.max_cap_rate_violation, self.tol))

def _as_dict(requests):
    if isinstance(requests, dict):
        return requests
    return {request.id: request for request in requests}

def intensity(k, decomp, requests):
    """
    Upper bound of the total rate interval ``k`` can see, the sum over
    parked requests of min{U, D / delta_k}.

    :param requests: Requests by id, or a list of requests. Parked ids
        that are missing are skipped.
    """
    requests = _as_dict(requests)
    delta = decomp.lengths[k]
    total = 0.0
    for request_id in decomp.parked[k]:
        request = requests.get(request_id)
        if request is None:
            continue
        total += min(request.max_rate, request.demand / delta)
    return total

def _span(request, decomp, active):
    span = decomp.spans[request.id]
    if active is None:
        return list(span)
    return [k for k in span if k in active]

def residual_demand(request, interval_set, decomp, active=None):
    """
    Demand left for ``request`` after it charges at full rate on every
    interval of its span outside ``interval_set``. May be negative.

    :param active: Interval indices still in play. Frozen intervals do
        not count towards the span. Defaults to every interval.
    :raises SolverDomainError: The request does not overlap the set.
    """
    span = _span(request, decomp, active)
    outside = [k for k in span if k not in interval_set]
    if len(outside) == len(span):
        raise SolverDomainError(
            "request {} does not overlap {}".format(request.id, interval_set))
    return request.demand - request.max_rate * float(
        np.sum(decomp.lengths[outside]))

def balanced_rate(interval_set, decomp, requests, carried_rate, active=None):
    """
    Total rate of the set if all the load it is forced to carry is spread
    evenly over it. Every overlapping request contributes its clamped
    residual demand once, each member its carried rate.
    """
    requests = _as_dict(requests)
    load = 0.0
    for request in requests.values():
        span = _span(request, decomp, active)
        if not any(k in interval_set for k in span):
            continue
        load += max(0.0, residual_demand(
            request, interval_set, decomp, active=active))
    members = list(interval_set.members)
    load += float(np.dot(carried_rate[members], decomp.lengths[members]))
    return load / interval_set.total_length

class SolverState():
    """
    Progress of the peeling.

    :param decomposition: Intervals of the whole instance.
    :param requests: Requests by id.
    """
    def __init__(self, decomposition, requests):
        self.decomposition = decomposition
        self.requests = _as_dict(requests)
        self.active_requests = set(
            request_id for request_id, request in self.requests.items()
            if request.demand > 0)
        self.active_intervals = list(range(len(decomposition)))
        self.carried_rate = np.zeros(len(decomposition))
        self.rates = {}
        self.iteration = 0
        self.peaks = []
        self.peak_sets = []

    @property
    def partial_schedule(self):
        return RateSchedule(self.decomposition, self.rates)

    def is_frozen(self, k):
        return k not in self.active_intervals

class _Timeline():
    """
    Active intervals merged into one timeline. Positions index
    ``intervals``; each active request occupies a contiguous range of
    positions [lo, hi].
    """
    def __init__(self, state):
        decomp = state.decomposition
        self.intervals = np.array(state.active_intervals, dtype=int)
        position = np.full(len(decomp), -1)
        position[self.intervals] = np.arange(len(self.intervals))

        self.lengths = decomp.lengths[self.intervals]
        self.millihours = np.array([
            decomp.end(k) - decomp.start(k) for k in self.intervals],
            dtype=np.int64)
        self.carried = state.carried_rate[self.intervals]

        self.ids = sorted(state.active_requests)
        lo, hi = [], []
        for request_id in self.ids:
            span = decomp.spans[request_id]
            positions = position[span.start:span.stop]
            positions = positions[positions >= 0]
            if not len(positions):
                raise AllocationError(
                    "request {} has no interval left".format(request_id))
            lo.append(positions[0])
            hi.append(positions[-1])
        self.lo = np.array(lo, dtype=int)
        self.hi = np.array(hi, dtype=int)
        self.demand = np.array([
            state.requests[i].demand for i in self.ids], dtype=float)
        self.max_rate = np.array([
            state.requests[i].max_rate for i in self.ids], dtype=float)

        cumulative = np.concatenate([[0.0], np.cumsum(self.lengths)])
        self.available = cumulative[self.hi + 1] - cumulative[self.lo]

        positions = np.arange(len(self.intervals))
        self.member = (
            (positions[None, :] >= self.lo[:, None]) &
            (positions[None, :] <= self.hi[:, None]))

    def __len__(self):
        return len(self.intervals)

    def overlap(self, in_set):
        """
        Hours each request overlaps the positions flagged in ``in_set``.
        """
        cumulative = np.concatenate(
            [[0.0], np.cumsum(self.lengths * in_set)])
        return cumulative[self.hi + 1] - cumulative[self.lo]

    def residual(self, in_set):
        """
        Demand each request has left after charging at full rate outside
        the flagged positions, and its overlap with them in hours.
        """
        overlap = self.overlap(in_set)
        return self.demand - self.max_rate * (self.available - overlap), overlap

    def forced_load(self, in_set):
        """
        Energy the flagged positions are forced to carry, carried load
        included.
        """
        residual, overlap = self.residual(in_set)
        forced = np.where(overlap > 0, np.maximum(0.0, residual), 0.0)
        carried = np.dot(self.carried * self.lengths, in_set)
        return float(np.sum(forced) + carried)

    def density(self, positions):
        in_set = np.zeros(len(self), dtype=float)
        in_set[positions] = 1.0
        return self.forced_load(in_set) / float(
            np.sum(self.lengths[positions]))

    def key(self):
        """
        Intensity plus carried rate of every position.
        """
        bound = np.minimum(
            self.max_rate[:, None],
            self.demand[:, None] / self.lengths[None, :])
        return np.sum(np.where(self.member, bound, 0.0), axis=0) + self.carried

def _tie(rate):
    return TIE_EPS * max(1.0, abs(rate))

class _Candidate():
    """
    Best set so far, compared by rate, then length, then window start,
    then member count.
    """
    def __init__(self, rate, millihours, start, positions, window):
        self.rate = rate
        self.millihours = millihours
        self.start = start
        self.positions = positions
        self.window = window

    @classmethod
    def of(cls, timeline, positions):
        positions = np.asarray(positions, dtype=int)
        return cls(
            timeline.density(positions),
            int(np.sum(timeline.millihours[positions])), int(positions[0]),
            positions, (int(positions[0]), int(positions[-1]) + 1))

    def beats(self, other):
        if other is None:
            return True
        eps = _tie(other.rate)
        if self.rate > other.rate + eps:
            return True
        if self.rate < other.rate - eps:
            return False
        if self.millihours != other.millihours:
            return self.millihours > other.millihours
        if self.start != other.start:
            return self.start < other.start
        return len(self.positions) < len(other.positions)

def _window_prefix(timeline, key, start, end, best=None):
    """
    Densest intensity ordered prefix of the positions [start, end].

    :param key: ``timeline.key()``.
    :param best: Candidate to beat. Prefixes that cannot reach its rate
        are skipped.
    :returns: _Candidate, or None when nothing can beat ``best``.
    """
    window = np.arange(start, end + 1)
    window_key = key[window]
    if best is not None and window_key.max() < best.rate - _tie(best.rate):
        return None

    order = window[np.lexsort((window, -window_key))]
    lengths = timeline.lengths[order]
    cum_length = np.cumsum(lengths)

    # Density of a prefix never exceeds the mean key over it.
    count = len(order)
    if best is not None:
        bound = np.cumsum(key[order] * lengths) / cum_length
        count = int(np.sum(bound >= best.rate - _tie(best.rate)))
        if count == 0:
            return None
    order = order[:count]
    lengths = lengths[:count]
    cum_length = cum_length[:count]

    rows = (timeline.lo <= end) & (timeline.hi >= start)
    cover = timeline.member[np.ix_(rows, order)] * lengths[None, :]
    overlap = np.cumsum(cover, axis=1)
    residual = (
        timeline.demand[rows, None] -
        timeline.max_rate[rows, None] * (
            timeline.available[rows, None] - overlap))
    forced = np.where(overlap > 0, np.maximum(0.0, residual), 0.0)
    load = forced.sum(axis=0) + np.cumsum(timeline.carried[order] * lengths)
    density = load / cum_length

    top = density.max()
    j = int(np.nonzero(density >= top - _tie(top))[0][-1])
    positions = np.sort(order[:j + 1])
    return _Candidate(
        float(density[j]), int(np.sum(timeline.millihours[positions])),
        int(start), positions, (int(start), int(end) + 1))

def _fastest_window_prefix(timeline):
    """
    Best set among the intensity ordered prefixes of every time window.
    """
    key = timeline.key()
    starts = np.unique(timeline.lo)
    ends = np.unique(timeline.hi)
    best = None
    for start in starts:
        for end in ends[ends >= start]:
            candidate = _window_prefix(timeline, key, start, end, best)
            if candidate is not None and candidate.beats(best):
                best = candidate
    return best

def _densest_prefix(timeline):
    """
    Densest set of the form [0, j] when every request starts at position
    0. The optimal totals of such a timeline never rise over time, so its
    densest set is one of these prefixes.
    """
    assert np.all(timeline.lo == 0), "prefix search needs a common start"
    cumulative = np.concatenate([[0.0], np.cumsum(timeline.lengths)])
    ends = cumulative[1:]
    reach = timeline.available
    overlap = np.minimum(ends[None, :], reach[:, None])
    residual = (
        timeline.demand[:, None] -
        timeline.max_rate[:, None] * (reach[:, None] - overlap))
    load = (
        np.maximum(0.0, residual).sum(axis=0) +
        np.cumsum(timeline.carried * timeline.lengths))
    density = load / ends
    top = density.max()
    j = int(np.nonzero(density >= top - _tie(top))[0][-1])
    return _Candidate.of(timeline, np.arange(j + 1))

def _units(energy):
    return int(round(float(energy) / FLOW_QUANTUM))

def _within(positions, lo, hi):
    """
    The sorted ``positions`` that fall in [lo, hi].
    """
    return positions[
        np.searchsorted(positions, lo):np.searchsorted(positions, hi, 'right')]

class _FlowNetwork():
    """
    Requests on one side, timeline positions on the other, capacities in
    whole FLOW_QUANTUMs. Node ids are plain integers, so the flow found
    does not depend on how Python hashes anything.

    :param rows: Number of request nodes.
    """
    def __init__(self, rows):
        self.offset = 2 + rows
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from([SOURCE, SINK])
        self.supply = 0
        self.edges = 0

    def request(self, r):
        return 2 + r

    def position(self, c):
        return self.offset + c

    def add(self, u, v, energy):
        """
        Edge of capacity ``energy`` kWh, left out when it rounds to zero.

        :returns: The capacity in units.
        """
        units = _units(energy)
        if units > 0:
            self.graph.add_edge(u, v, capacity=units)
            self.edges += 1
        return units

    @property
    def slack(self):
        """
        Units the rounding of every capacity can add up to.
        """
        return self.edges + 1

def _max_excess(timeline, level, positions, energy):
    """
    Min-cut search for the subset of ``positions`` with the largest
    excess load - level * length, when request row r has ``energy[r]``
    kWh to put on the positions of its span among them.

    :param positions: Sorted position indices the subset is drawn from.
    :returns: (excess in kWh, slack in kWh, the largest subset reaching
        the excess).
    """
    network = _FlowNetwork(len(timeline.ids))
    graph = network.graph
    graph.add_nodes_from(network.position(p) for p in positions)
    for row in np.nonzero(energy > 0)[0]:
        span = _within(positions, timeline.lo[row], timeline.hi[row])
        if not len(span):
            continue
        network.supply += network.add(
            SOURCE, network.request(row), energy[row])
        for p in span:
            network.add(
                network.request(row), network.position(p),
                timeline.max_rate[row] * timeline.lengths[p])
    for p in positions:
        room = (level - timeline.carried[p]) * timeline.lengths[p]
        if room >= 0:
            network.add(network.position(p), SINK, room)
        else:
            network.supply += network.add(SOURCE, network.position(p), -room)

    # The source side networkx returns is the largest minimum cut side.
    cut, (source_side, _) = nx.minimum_cut(
        graph, SOURCE, SINK, flow_func=preflow_push)
    members = np.array(sorted(
        node - network.offset for node in source_side
        if node >= network.offset), dtype=int)
    return (
        (network.supply - cut) * FLOW_QUANTUM, network.slack * FLOW_QUANTUM,
        members)

def _refine(timeline, best):
    """
    Dinkelbach iterations on the min-cut search until no denser set
    exists, then the largest set at that rate.
    """
    logger = logging.getLogger('pevsched.offline.certify')
    key = timeline.key()
    for _ in range(MAX_REFINEMENTS):
        level = best.rate
        # A set beating the level only holds positions whose key reaches it.
        positions = np.nonzero(key >= level - _tie(level))[0]
        in_set = np.zeros(len(timeline))
        in_set[positions] = 1.0
        residual, overlap = timeline.residual(in_set)
        energy = np.where(overlap > 0, np.maximum(0.0, residual), 0.0)
        _, _, members = _max_excess(
            timeline, level, positions, energy)
        if not len(members):
            return best
        candidate = _Candidate.of(timeline, members)
        if candidate.rate > level + _tie(level):
            logger.debug(
                "denser set found: {:.9f} -> {:.9f} kW over {}".format(
                    level, candidate.rate, list(timeline.intervals[members])))
            best = candidate
            continue
        if (candidate.rate >= level - PEAK_TOL and
                candidate.millihours > best.millihours):
            return candidate
        return best
    raise SolverError("densest set refinement did not settle")

def _part_rate(timeline, positions, energy):
    """
    Mean total rate of ``positions`` carrying ``energy[r]`` of each
    request row that spans them.
    """
    in_set = np.zeros(len(timeline))
    in_set[positions] = 1.0
    inside = timeline.overlap(in_set) > 0
    load = float(np.sum(energy[inside])) + float(np.dot(
        timeline.carried[positions], timeline.lengths[positions]))
    return load / float(np.sum(timeline.lengths[positions]))

def _split(timeline, positions, energy, top):
    """
    Energies of ``positions`` split between ``top`` and the rest. A
    request fills its lower intervals first.
    """
    rest = np.setdiff1d(positions, top)
    in_rest = np.zeros(len(timeline))
    in_rest[rest] = 1.0
    on_rest = np.minimum(
        energy, timeline.max_rate * timeline.overlap(in_rest))
    in_top = np.zeros(len(timeline))
    in_top[top] = 1.0
    on_top = np.where(
        timeline.overlap(in_top) > 0, np.maximum(0.0, energy - on_rest), 0.0)
    return (top, on_top), (rest, on_rest)

def _levels(timeline):
    """
    Optimal total rate of every position, as a list of (rate, positions)
    levels, highest first.

    Each part of the timeline is cut at its mean rate. The positions on
    the source side of the largest minimum cut are those whose optimal
    total is at least the mean and the others are below it. A part the
    cut does not split, or splits into two sides at the same rate, is
    level.
    """
    logger = logging.getLogger('pevsched.offline.certify')
    parts = [(np.arange(len(timeline)), timeline.demand.copy())]
    levels = []
    cuts = 0
    while parts:
        positions, energy = parts.pop()
        rate = _part_rate(timeline, positions, energy)
        _, _, top = _max_excess(timeline, rate, positions, energy)
        cuts += 1
        if len(top) in (0, len(positions)):
            levels.append((rate, positions))
            continue
        upper, lower = _split(timeline, positions, energy, top)
        if _part_rate(timeline, *upper) <= _part_rate(timeline, *lower) + PEAK_TOL:
            levels.append((rate, positions))
            continue
        parts.append(lower)
        parts.append(upper)

    levels.sort(key=lambda level: (-level[0], int(level[1][0])))
    merged = []
    for rate, positions in levels:
        if merged and merged[-1][0] - rate <= PEAK_TOL:
            merged[-1] = (merged[-1][0], np.union1d(merged[-1][1], positions))
        else:
            merged.append((rate, positions))
    logger.debug("{} levels from {} cuts over {} positions".format(
        len(merged), cuts, len(timeline)))
    return merged

def _interval_set(timeline, positions, window=None):
    members = timeline.intervals[positions]
    if window is None:
        window = (positions[0], positions[-1] + 1)
    window = (
        int(timeline.intervals[window[0]]),
        int(timeline.intervals[window[1] - 1]) + 1)
    return IntervalSet(
        window, [int(k) for k in members],
        float(np.sum(timeline.lengths[positions])))

def select_peak_set(state, certify=False):
    """
    Find the interval set with the highest balanced rate.

    Without ``certify`` every time window (an active request's first
    interval to an active request's last) is searched over its intensity
    ordered prefixes. With ``certify`` the best prefix of the whole
    timeline is improved by min-cuts until no denser set exists, and the
    largest set at that rate is returned.

    :param state: SolverState, which carries the decomposition and the
        requests.
    :returns: (IntervalSet, peak rate in kW).
    :raises NoActiveIntervals: Every interval is frozen.
    """
    if not state.active_intervals:
        raise NoActiveIntervals("every interval is frozen")

    timeline = _Timeline(state)
    if not timeline.ids:
        raise NoActiveIntervals("no active request left")
    if certify:
        best = _window_prefix(timeline, timeline.key(), 0, len(timeline) - 1)
        best = _refine(timeline, best)
    else:
        best = _fastest_window_prefix(timeline)

    interval_set = _interval_set(timeline, best.positions, best.window)
    logger = logging.getLogger('pevsched.offline.peak')
    logger.debug("iteration {}: peak {:.9f} kW on {}".format(
        state.iteration, best.rate, interval_set))
    return interval_set, best.rate

def _transport(timeline, rows, residual, positions, targets):
    """
    Split each row's residual over the set positions so that every
    position receives its target, by max-flow in whole FLOW_QUANTUMs.

    :returns: Array rows x positions of energies (kWh).
    :raises AllocationError: More than rounding is left unplaced.
    """
    network = _FlowNetwork(len(rows))
    column = {int(p): c for c, p in enumerate(positions)}
    needed = 0
    for r, row in enumerate(rows):
        needed += network.add(SOURCE, network.request(r), residual[r])
        for p in _within(positions, timeline.lo[row], timeline.hi[row]):
            network.add(
                network.request(r), network.position(column[int(p)]),
                timeline.max_rate[row] * timeline.lengths[p])
    for c, target in enumerate(targets):
        network.add(network.position(c), SINK, target)

    value, flow = nx.maximum_flow(
        network.graph, SOURCE, SINK, flow_func=preflow_push)
    if value < needed - network.slack:
        raise AllocationError(
            "peak set load cannot be placed: {:.9f} of {:.9f} kWh".format(
                value * FLOW_QUANTUM, needed * FLOW_QUANTUM))

    energy = np.zeros((len(rows), len(positions)))
    for r in range(len(rows)):
        for node, amount in flow.get(network.request(r), {}).items():
            energy[r, node - network.offset] = amount * FLOW_QUANTUM
    return energy

def allocate_rates(state, interval_set, s_star):
    """
    Freeze ``interval_set`` at total rate ``s_star``.

    Requests overlapping the set with non-negative residual demand charge
    their residual inside the set and at full rate everywhere else; they
    are done. Overlapping requests with negative residual get zero on the
    overlap and stay active. The members leave the active intervals.

    :returns: The updated state.
    :raises AllocationError: A rate falls outside [0, U] or the frozen
        totals miss ``s_star``.
    :raises PeakOrderError: ``s_star`` is above an earlier peak.
    """
    logger = logging.getLogger('pevsched.offline.alloc')
    if state.peaks:
        previous = state.peaks[-1]
        if s_star > previous + PEAK_TOL + 1e-9 * previous:
            raise PeakOrderError(
                "peak {:.9f} kW follows peak {:.9f} kW".format(
                    s_star, previous))

    timeline = _Timeline(state)
    position = {int(k): p for p, k in enumerate(timeline.intervals)}
    positions = np.array(
        [position[k] for k in interval_set.members], dtype=int)
    in_set = np.zeros(len(timeline))
    in_set[positions] = 1.0
    total_length = float(np.sum(timeline.lengths[positions]))

    overlap = timeline.overlap(in_set)
    residual = timeline.demand - timeline.max_rate * (
        timeline.available - overlap)
    floor = -1e-12 * max(1.0, float(np.max(timeline.demand)))
    chosen = np.nonzero((overlap > 0) & (residual >= floor))[0]
    residual = np.maximum(residual[chosen], 0.0)

    carried = timeline.carried[positions]
    spans_all = (
        np.all(timeline.lo[chosen] <= positions[0]) and
        np.all(timeline.hi[chosen] >= positions[-1]))
    uniform = np.ptp(carried) <= TIE_EPS * max(1.0, s_star)
    if spans_all and uniform:
        energy = (
            residual[:, None] * timeline.lengths[positions][None, :] /
            total_length)
    else:
        targets = np.maximum(0.0, (s_star - carried) * timeline.lengths[positions])
        energy = _transport(timeline, chosen, residual, positions, targets)

    rates = energy / timeline.lengths[positions][None, :]
    for r, row in enumerate(chosen):
        request_id = timeline.ids[row]
        cap = timeline.max_rate[row]
        if rates[r].min() < -RATE_TOL or rates[r].max() > cap + RATE_TOL:
            raise AllocationError(
                "request {} rate {} outside [0, {}]".format(
                    request_id, rates[r], cap))
        for c, p in enumerate(positions):
            k = int(timeline.intervals[p])
            rate = float(min(max(rates[r, c], 0.0), cap))
            if rate > 0:
                state.rates[(request_id, k)] = rate
        for p in range(timeline.lo[row], timeline.hi[row] + 1):
            if in_set[p]:
                continue
            k = int(timeline.intervals[p])
            state.rates[(request_id, k)] = float(cap)
            state.carried_rate[k] += cap
        state.active_requests.discard(request_id)

    frozen_totals = carried + rates.sum(axis=0)
    miss = float(np.max(np.abs(frozen_totals - s_star)))
    if miss > KKT_TOL * max(1.0, s_star) / 10:
        raise AllocationError(
            "frozen totals {} miss the peak {:.9f} kW".format(
                frozen_totals, s_star))

    for k in interval_set.members:
        state.carried_rate[k] = s_star
    frozen = set(interval_set.members)
    state.active_intervals = [
        k for k in state.active_intervals if k not in frozen]
    state.peaks.append(s_star)
    state.peak_sets.append(interval_set)
    state.iteration += 1

    logger.debug("scheduled {} at peak {:.9f} kW, {} requests left".format(
        [timeline.ids[row] for row in chosen], s_star,
        len(state.active_requests)))
    return state

def verify_kkt(schedule, requests, decomp, tol=KKT_TOL):
    """
    Check the optimality conditions of every request.

    A request's intervals split into zero rate, full rate and the rest.
    The totals must be equal over the rest, every interval where it
    charges must have a total no higher than any interval where it does
    not, and every full rate interval a total no higher than any interval
    where it charges below its cap.

    :returns: KktReport.
    """
    zero_tol = RATE_TOL
    totals = schedule.totals
    balance = zero_rate = cap_rate = 0.0
    for request in requests:
        span = decomp.spans[request.id]
        rates = schedule.request_rates(request.id)
        span_totals = totals[span.start:span.stop]
        zero = rates <= zero_tol
        cap = rates >= request.max_rate - zero_tol
        interior = ~zero & ~cap

        if np.any(interior):
            balance = max(balance, float(np.ptp(span_totals[interior])))
        if np.any(zero) and np.any(~zero):
            zero_rate = max(zero_rate, float(
                span_totals[~zero].max() - span_totals[zero].min()))
        if np.any(cap) and np.any(~cap):
            cap_rate = max(cap_rate, float(
                span_totals[cap].max() - span_totals[~cap].min()))
    return KktReport(balance, zero_rate, cap_rate, tol)

# Failures a solve run recovers from by trying the next run.
SOLVE_FAILURES = (
    SolverError, ValueError, ArithmeticError, nx.NetworkXException)

class OfflineSolver():
    """
    Solver for the offline problem.

    A solve computes the levels of the optimum and freezes them top down.
    Should that fail a guard, it falls back to a certified peeling (a
    max-flow check of every peak). With ``certify=False`` the quick window
    search peeling is tried before either.

    :param tol: KKT tolerance the result must pass (kW).
    :param certify: Skip the window search.
    """
    def __init__(self, tol=KKT_TOL, certify=True):
        self.tol = tol
        self.certify = certify
        self.peaks = []
        self.iterations = 0
        self.certified = False
        self.decomposition = None

    def _peel(self, requests, decomp, certify, stop_after=None):
        state = SolverState(decomp, requests)
        while state.active_requests:
            if not state.active_intervals:
                raise AllocationError(
                    "requests {} have no interval left".format(
                        sorted(state.active_requests)))
            interval_set, s_star = select_peak_set(state, certify=certify)
            allocate_rates(state, interval_set, s_star)
            if stop_after is not None and state.is_frozen(stop_after):
                break
        return state

    def _peel_levels(self, requests, decomp):
        logger = logging.getLogger('pevsched.offline.peak')
        state = SolverState(decomp, requests)
        if not state.active_requests:
            return state
        timeline = _Timeline(state)
        for _, positions in _levels(timeline):
            if not state.active_requests:
                break
            current = _Timeline(state)
            members = np.searchsorted(
                current.intervals, timeline.intervals[positions])
            interval_set = _interval_set(current, members)
            s_star = current.density(members)
            logger.debug("level {}: {:.9f} kW on {}".format(
                state.iteration, s_star, interval_set))
            allocate_rates(state, interval_set, s_star)
        return state

    def _finish(self, state, certified):
        self.peaks = list(state.peaks)
        self.iterations = state.iteration
        self.certified = certified
        return state.partial_schedule

    def solve(self, requests):
        """
        Optimal schedule of ``requests``.

        :raises InfeasibleRequestError: A request cannot be served.
        :raises SolverError: Every run failed a check or raised.
        """
        logger = logging.getLogger('pevsched.offline.solve')
        requests = list(requests)
        reject_infeasible(requests)
        decomp = decompose_intervals(requests)
        self.decomposition = decomp

        runs = [
            ("level search", True, self._peel_levels, {}),
            ("certified peel", True, self._peel, {'certify': True})]
        if not self.certify:
            runs.insert(0, ("window search", False, self._peel, {'certify': False}))

        failures = []
        for name, certified, run, options in runs:
            try:
                state = run(requests, decomp, **options)
                schedule = self._finish(state, certified)
                failure = self._check(schedule, requests, decomp)
            except SOLVE_FAILURES as e:
                failure = "{}: {}".format(type(e).__name__, e)
            if failure is None:
                logger.debug("solved {} requests by {} in {} iterations".format(
                    len(requests), name, self.iterations))
                return schedule
            logger.warning("{} of {} requests failed: {}".format(
                name, len(requests), failure))
            failures.append("{} ({})".format(name, failure))
        raise SolverError("every solve of {} requests failed: {}".format(
            len(requests), "; ".join(failures)))

    def _check(self, schedule, requests, decomp):
        report = validate_schedule(schedule, requests, decomp)
        if not report.feasible:
            return str(report)
        kkt = verify_kkt(schedule, requests, decomp, self.tol)
        if not kkt.passed:
            return str(kkt)
        return None

    def first_rates(self, requests, start):
        """
        Rates of the first interval only, for requests that all become
        available at ``start``. Only the densest prefix of the timeline
        is frozen.

        :returns: Dict of request id -> rate (kW).
        """
        requests = list(requests)
        assert all(r.arrival == start for r in requests), (
            "first_rates() needs every request to start at {}".format(start))
        if not requests:
            return {}
        decomp = decompose_intervals(requests)
        state = SolverState(decomp, requests)
        try:
            if state.active_requests:
                timeline = _Timeline(state)
                best = _densest_prefix(timeline)
                allocate_rates(
                    state, _interval_set(timeline, best.positions), best.rate)
        except SOLVE_FAILURES as e:
            logger = logging.getLogger('pevsched.offline.solve')
            logger.warning("snapshot solve failed ({}), certifying".format(e))
            state = self._peel(requests, decomp, certify=True, stop_after=0)
        self.peaks = list(state.peaks)
        self.iterations = state.iteration
        return {
            request.id: state.rates.get((request.id, 0), 0.0)
            for request in requests}

def solve_offline(requests, cost=None, tol=KKT_TOL):
    """
    Globally optimal schedule for ``requests``. The optimum does not depend
    on the cost coefficients as long as the cost is strictly convex, so
    ``cost`` is only used for logging.

    :returns: RateSchedule on ``decompose_intervals(requests)``.
    """
    solver = OfflineSolver(tol=tol)
    schedule = solver.solve(requests)
    if cost is not None:
        logger = logging.getLogger('pevsched.offline.solve')
        logger.info("offline optimum of {} requests: {:.6g} $ ({} peaks)".format(
            len(requests), evaluate_cost(schedule, solver.decomposition, cost),
            len(solver.peaks)))
    return schedule

def water_fill(others, max_rate, lengths, demand):
    """
    Rates of one request that minimise a convex cost of the totals, given
    the other requests' load. The request fills the lowest intervals first
    up to a common level, capped at ``max_rate``.

    :param others: Total rate of everybody else on each interval (kW).
    :param lengths: Interval lengths (h).
    :param demand: Energy to place (kWh).
    :returns: Rates (kW), one per interval.
    """
    if demand <= 0:
        return np.zeros_like(others)
    points = np.sort(np.concatenate([others, others + max_rate]))
    filled = np.clip(
        points[:, None] - others[None, :], 0.0, max_rate) @ lengths
    if demand >= filled[-1]:
        return np.full_like(others, max_rate)
    j = int(np.searchsorted(filled, demand))
    if j == 0 or filled[j] == filled[j - 1]:
        level = points[j]
    else:
        fraction = (demand - filled[j - 1]) / (filled[j] - filled[j - 1])
        level = points[j - 1] + fraction * (points[j] - points[j - 1])
    return np.clip(level - others, 0.0, max_rate)

def oracle_solve(
        requests, cost=None, tol=ORACLE_TOL, max_passes=ORACLE_MAX_PASSES):
    """
    Independent solver for small instances (a dozen requests or so).
    Requests take turns re-placing their whole demand optimally against
    everybody else's load until no request can improve.

    :returns: RateSchedule.
    :raises OracleConvergenceError: Still not converged after
        ``max_passes`` passes.
    """
    requests = list(requests)
    reject_infeasible(requests)
    decomp = decompose_intervals(requests)
    totals = np.zeros(len(decomp))
    rates = {}
    for request in requests:
        span = decomp.spans[request.id]
        x = np.full(len(span), request.demand / request.window)
        rates[request.id] = x
        totals[span.start:span.stop] += x

    def gap():
        worst = 0.0
        for request in requests:
            span = decomp.spans[request.id]
            x = rates[request.id]
            s = totals[span.start:span.stop]
            charging = x > RATE_TOL
            below_cap = x < request.max_rate - RATE_TOL
            if np.any(charging) and np.any(below_cap):
                worst = max(worst, s[charging].max() - s[below_cap].min())
        return worst

    violation = gap()
    passes = 0
    while violation > tol:
        if passes >= max_passes:
            raise OracleConvergenceError(violation, passes)
        for request in requests:
            span = decomp.spans[request.id]
            x = rates[request.id]
            others = totals[span.start:span.stop] - x
            new = water_fill(
                others, request.max_rate,
                decomp.lengths[span.start:span.stop], request.demand)
            totals[span.start:span.stop] = others + new
            rates[request.id] = new
        passes += 1
        violation = gap()

    logger = logging.getLogger('pevsched.offline.oracle')
    logger.debug("oracle converged in {} passes, gap {:.3g} kW".format(
        passes, violation))
    schedule = {}
    for request in requests:
        span = decomp.spans[request.id]
        for k, rate in zip(span, rates[request.id]):
            if rate > 0:
                schedule[(request.id, k)] = float(rate)
    return RateSchedule(decomp, schedule)
