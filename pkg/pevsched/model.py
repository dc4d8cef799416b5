"""
The charging problem's data model. Everything the offline solver and the
online engine share lives here: charging requests, the split of the time
axis into intervals over which the parked set is constant, piecewise
constant rate schedules and the quadratic generation cost.

Time is held as integer milli-hours (``TimeStamp``) so boundary
comparisons and event ordering are exact. Energies are kWh and rates are
kW, both plain floats.
::

    requests = [
        ChargingRequest.from_hours(1, 0, 3, 2.0, 2.0, 35),
        ChargingRequest.from_hours(2, 1, 4, 3.0, 2.0, 35)]
    decomp = decompose_intervals(requests)
    decomp.boundaries   # 0h, 1h, 3h, 4h
    decomp.parked       # {1}, {1, 2}, {2}
"""
import json
import logging
import functools
import operator
import collections

import numpy as np

# Milli-hours per hour. All TimeStamps are integers on this grid.
MILLIHOURS = 1000

# Delivered energy may fall short of a demand by this much (kWh).
DEMAND_TOL = 1e-6

# Rates may stray outside [0, U] by this much (kW).
RATE_TOL = 1e-9

# Generation cost coefficients used throughout the simulations.
DEFAULT_A = 1e-4
DEFAULT_B = 0.6e-4

class ModelError(Exception):
    """
    Base error for malformed model objects.
    """
    pass

class InstanceFormatError(ModelError):
    """
    An instance file could not be parsed, or is missing a field.
    """
    pass

class InfeasibleRequestError(ModelError):
    """
    One or more requests ask for more energy than they can receive before
    their deadline.

    :param ids: Ids of every infeasible request.
    """
    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(
            "Infeasible requests: {}".format(
                ", ".join(str(i) for i in self.ids)))

class ScheduleMismatchError(ModelError):
    """
    A schedule was used with a decomposition it was not built on.
    """
    pass

@functools.total_ordering
class TimeStamp():
    """
    Non-negative point in time, stored as integer milli-hours. Arithmetic
    between TimeStamps is exact integer arithmetic.
    ::

        t = TimeStamp.from_hours(1.5)
        t.value                             # 1500
        (t + 250).hours                     # 1.75
        TimeStamp.from_hours(4) - t         # 2500 (milli-hours)
    """
    __slots__ = ('value',)

    def __init__(self, value):
        value = operator.index(value)
        if value < 0:
            raise ModelError("TimeStamp must be non-negative, got {}".format(
                value))
        self.value = value

    @classmethod
    def from_hours(cls, hours):
        """
        Quantize decimal hours onto the milli-hour grid.
        """
        return cls(int(round(float(hours) * MILLIHOURS)))

    @property
    def hours(self):
        return self.value / MILLIHOURS

    def __add__(self, millihours):
        return TimeStamp(self.value + operator.index(millihours))

    def __sub__(self, other):
        # TimeStamp - TimeStamp is a duration in milli-hours, TimeStamp -
        # int is an earlier TimeStamp.
        if isinstance(other, TimeStamp):
            return self.value - other.value
        return TimeStamp(self.value - operator.index(other))

    def __eq__(self, other):
        if not isinstance(other, TimeStamp):
            return NotImplemented
        return self.value == other.value

    def __lt__(self, other):
        if not isinstance(other, TimeStamp):
            return NotImplemented
        return self.value < other.value

    def __hash__(self):
        return hash(self.value)

    def __str__(self):
        return "{:.3f}h".format(self.hours)

    def __repr__(self):
        return "TimeStamp({})".format(self.value)

_Request = collections.namedtuple(
    "_Request",
    ["id", "arrival", "deadline", "demand", "max_rate", "capacity"])

class ChargingRequest(_Request):
    """
    One PEV's charging profile.

    :param id: Unique integer id.
    :param arrival: TimeStamp the PEV plugs in.
    :param deadline: TimeStamp the PEV leaves.
    :param demand: Energy to deliver before the deadline (kWh).
    :param max_rate: Maximum charging rate (kW).
    :param capacity: Battery capacity (kWh).
    """
    __slots__ = ()

    def __new__(cls, id, arrival, deadline, demand, max_rate, capacity):
        if not isinstance(arrival, TimeStamp):
            raise ModelError("request {}: arrival must be a TimeStamp".format(
                id))
        if not isinstance(deadline, TimeStamp):
            raise ModelError(
                "request {}: deadline must be a TimeStamp".format(id))
        if not arrival < deadline:
            raise ModelError(
                "request {}: arrival {} is not before deadline {}".format(
                    id, arrival, deadline))
        if demand < 0:
            raise ModelError("request {}: negative demand {}".format(
                id, demand))
        if max_rate <= 0:
            raise ModelError("request {}: max_rate must be positive".format(
                id))
        if capacity <= 0:
            raise ModelError("request {}: capacity must be positive".format(
                id))
        return super().__new__(
            cls, int(id), arrival, deadline, float(demand), float(max_rate),
            float(capacity))

    @classmethod
    def from_hours(
            cls, id, arrival_h, deadline_h, demand, max_rate, capacity):
        """
        Build a request from decimal hours, quantized to milli-hours.
        """
        return cls(
            id, TimeStamp.from_hours(arrival_h),
            TimeStamp.from_hours(deadline_h), demand, max_rate, capacity)

    @property
    def window(self):
        """ Parking time in hours. """
        return (self.deadline - self.arrival) / MILLIHOURS

    @property
    def max_energy(self):
        """
        Most energy the request can accept, min{U * window, capacity}.
        """
        return min(self.max_rate * self.window, self.capacity)

class CostModel(collections.namedtuple("CostModel", ["a", "b"])):
    """
    Generation cost ``a * s + b * s**2`` per hour at total rate ``s``.

    :param a: Linear coefficient ($/kWh).
    :param b: Quadratic coefficient ($/kWh/kW). Must be positive so the
        cost is strictly convex.
    """
    __slots__ = ()

    def __new__(cls, a=DEFAULT_A, b=DEFAULT_B):
        if a < 0:
            raise ModelError("cost coefficient a must be >= 0")
        if b <= 0:
            raise ModelError("cost coefficient b must be > 0")
        return super().__new__(cls, float(a), float(b))

    def rate_cost(self, total):
        """
        Cost per hour of running at total rate ``total`` (scalar or array).
        """
        return self.a * total + self.b * total * total

class IntervalDecomposition():
    """
    The time axis cut at every arrival and deadline. Over each interval
    the set of parked requests does not change.

    :param boundaries: Strictly increasing TimeStamps t1 < t2 < ...
    :param parked: For each interval the frozenset of parked request ids.
    :param spans: Request id -> ``range`` of interval indices it parks in.
    """
    def __init__(self, boundaries, parked, spans):
        self.boundaries = tuple(boundaries)
        self.parked = tuple(parked)
        self.spans = dict(spans)

        lengths = np.array([
            (end - start) / MILLIHOURS
            for start, end in zip(self.boundaries, self.boundaries[1:])],
            dtype=float)
        lengths.flags.writeable = False
        self.lengths = lengths

        assert len(self.parked) == len(self.lengths), (
            "One parked set is needed per interval.")

    def __len__(self):
        return len(self.lengths)

    def start(self, k):
        return self.boundaries[k]

    def end(self, k):
        return self.boundaries[k + 1]

    @property
    def ids(self):
        return sorted(self.spans)

    def __str__(self):
        return "IntervalDecomposition({} intervals, {} requests)".format(
            len(self), len(self.spans))

RequestCheck = collections.namedtuple(
    "RequestCheck",
    ["id", "demand", "delivered", "shortfall", "short", "rate_violation"])

class FeasibilityReport():
    """
    Per request delivered energy and bound violations of a schedule.
    A schedule is feasible when no request is flagged.
    """
    def __init__(self, checks):
        self.checks = list(checks)

    @property
    def feasible(self):
        return not self.flagged

    @property
    def flagged(self):
        return [
            check for check in self.checks
            if check.short or check.rate_violation > 0]

    @property
    def max_shortfall(self):
        return max([check.shortfall for check in self.checks], default=0.0)

    def __str__(self):
        if self.feasible:
            return "feasible ({} requests)".format(len(self.checks))
        lines = ["infeasible:"]
        for check in self.flagged:
            lines.append(
                "  request {}: delivered {:.6f} of {:.6f} kWh, "
                "rate violation {:.3g} kW".format(
                    check.id, check.delivered, check.demand,
                    check.rate_violation))
        return "\n".join(lines)

class RateSchedule():
    """
    Piecewise constant charging rates on an IntervalDecomposition.

    :param decomposition: Intervals the rates are defined on.
    :param rates: Mapping of (request id, interval index) -> rate (kW).
        Missing entries are zero. Entries are only allowed where the
        request is parked.
    """
    def __init__(self, decomposition, rates):
        self.decomposition = decomposition
        self.rates = {}

        totals = np.zeros(len(decomposition))
        for (request_id, k), rate in rates.items():
            span = decomposition.spans.get(request_id)
            if span is None or k not in span:
                raise ScheduleMismatchError(
                    "request {} is not parked in interval {}".format(
                        request_id, k))
            rate = float(rate)
            self.rates[(request_id, k)] = rate
            totals[k] += rate
        totals.flags.writeable = False
        self.totals = totals

    def rate(self, request_id, k):
        return self.rates.get((request_id, k), 0.0)

    def request_rates(self, request_id):
        """
        Rates of one request over its span, as an array.
        """
        span = self.decomposition.spans[request_id]
        return np.array([self.rate(request_id, k) for k in span])

    def delivered(self, request_id):
        """ Energy delivered to a request (kWh). """
        span = self.decomposition.spans[request_id]
        lengths = self.decomposition.lengths[span.start:span.stop]
        return float(np.dot(self.request_rates(request_id), lengths))

    def intervals(self):
        """
        Plain dict form of the schedule, one entry per interval.
        """
        decomp = self.decomposition
        per_interval = [dict() for _ in range(len(decomp))]
        for (request_id, k), rate in sorted(self.rates.items()):
            per_interval[k][str(request_id)] = rate
        return [
            {
                "start_h": decomp.start(k).hours,
                "end_h": decomp.end(k).hours,
                "total_kw": float(self.totals[k]),
                "rates": per_interval[k],
            }
            for k in range(len(decomp))]

def check_request_feasible(request):
    """
    True if the request's demand can be met before its deadline, i.e.
    demand <= min{max_rate * window, capacity}.
    """
    return request.demand <= request.max_energy

def reject_infeasible(requests):
    """
    Raise InfeasibleRequestError naming every infeasible request.
    """
    bad = [
        request.id for request in requests
        if not check_request_feasible(request)]
    if bad:
        raise InfeasibleRequestError(bad)

def decompose_intervals(requests, extra_boundaries=()):
    """
    Split the time axis at every distinct arrival and deadline.

    :param requests: Charging requests. An empty list gives an empty
        decomposition.
    :param extra_boundaries: Additional TimeStamps to cut at, eg. the
        event times of an online run.
    :returns: IntervalDecomposition.
    """
    times = set(extra_boundaries)
    ids = set()
    for request in requests:
        if request.id in ids:
            raise ModelError("duplicate request id {}".format(request.id))
        ids.add(request.id)
        times.add(request.arrival)
        times.add(request.deadline)

    boundaries = sorted(times)
    if len(boundaries) < 2:
        return IntervalDecomposition((), (), {})

    index = {t: k for k, t in enumerate(boundaries)}
    parked = [set() for _ in range(len(boundaries) - 1)]
    spans = {}
    for request in requests:
        span = range(index[request.arrival], index[request.deadline])
        spans[request.id] = span
        for k in span:
            parked[k].add(request.id)

    return IntervalDecomposition(
        boundaries, [frozenset(p) for p in parked], spans)

def evaluate_cost(schedule, decomp, cost):
    """
    Total generation cost, the sum over intervals of
    (a * s_k + b * s_k**2) * delta_k.
    """
    if (schedule.decomposition is not decomp and
            (len(schedule.totals) != len(decomp) or
             schedule.decomposition.boundaries != decomp.boundaries)):
        raise ScheduleMismatchError(
            "schedule has {} intervals, decomposition has {}".format(
                len(schedule.totals), len(decomp)))
    totals = schedule.totals
    return float(np.sum(cost.rate_cost(totals) * decomp.lengths))

def validate_schedule(
        schedule, requests, decomp, demand_tol=DEMAND_TOL,
        rate_tol=RATE_TOL):
    """
    Check every request receives its demand and every rate is inside
    [0, max_rate].

    :returns: FeasibilityReport.
    """
    checks = []
    for request in requests:
        span = decomp.spans.get(request.id)
        if span is None:
            raise ScheduleMismatchError(
                "request {} is not in the decomposition".format(request.id))
        rates = schedule.request_rates(request.id)
        lengths = decomp.lengths[span.start:span.stop]
        delivered = float(np.dot(rates, lengths))
        shortfall = max(0.0, request.demand - delivered)

        rate_violation = 0.0
        if len(rates):
            rate_violation = float(max(
                0.0, np.max(rates - request.max_rate), np.max(-rates)))
        if rate_violation <= rate_tol:
            rate_violation = 0.0

        checks.append(RequestCheck(
            id=request.id, demand=request.demand, delivered=delivered,
            shortfall=shortfall, short=shortfall > demand_tol,
            rate_violation=rate_violation))

    report = FeasibilityReport(checks)
    if not report.feasible:
        logger = logging.getLogger('pevsched.model.validate')
        logger.info("schedule is {}".format(report))
    return report

_REQUEST_FIELDS = [
    "id", "arrival_h", "deadline_h", "demand_kwh", "max_rate_kw",
    "capacity_kwh"]

def parse_instance(data, source="<instance>"):
    """
    Build (CostModel, requests) from an already decoded instance document.

    :param data: Dict with ``cost`` and ``requests`` keys.
    :param source: Name used in error messages.
    """
    def number(obj, field, where):
        if field not in obj:
            raise InstanceFormatError(
                "{}: {}: missing field '{}'".format(source, where, field))
        value = obj[field]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InstanceFormatError(
                "{}: {}: field '{}' must be a number, got {!r}".format(
                    source, where, field, value))
        return value

    if not isinstance(data, dict):
        raise InstanceFormatError(
            "{}: top level must be an object".format(source))

    cost_data = data.get("cost", {"a": DEFAULT_A, "b": DEFAULT_B})
    if not isinstance(cost_data, dict):
        raise InstanceFormatError("{}: 'cost' must be an object".format(
            source))
    try:
        cost = CostModel(
            number(cost_data, "a", "cost"), number(cost_data, "b", "cost"))
    except ModelError as e:
        raise InstanceFormatError("{}: cost: {}".format(source, e))

    request_data = data.get("requests")
    if not isinstance(request_data, list):
        raise InstanceFormatError(
            "{}: 'requests' must be a list".format(source))

    requests = []
    for n, item in enumerate(request_data):
        where = "requests[{}]".format(n)
        if not isinstance(item, dict):
            raise InstanceFormatError(
                "{}: {} must be an object".format(source, where))
        values = [number(item, field, where) for field in _REQUEST_FIELDS]
        try:
            requests.append(ChargingRequest.from_hours(*values))
        except ModelError as e:
            raise InstanceFormatError("{}: {}: {}".format(source, where, e))
    return cost, requests

def load_instance(path):
    """
    Read an instance file.
    ::

        {
          "cost": {"a": 1e-4, "b": 6e-5},
          "requests": [
            {"id": 1, "arrival_h": 0, "deadline_h": 4,
             "demand_kwh": 4, "max_rate_kw": 3.3, "capacity_kwh": 35}
          ]
        }

    :returns: (CostModel, list of ChargingRequest).
    :raises InstanceFormatError: Malformed JSON (with line and column) or
        a missing/invalid field.
    """
    with open(path) as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InstanceFormatError("{}: line {} column {}: {}".format(
            path, e.lineno, e.colno, e.msg))
    return parse_instance(data, source=str(path))

def dump_instance(path, cost, requests):
    """
    Write an instance file readable by load_instance().
    """
    data = {
        "cost": {"a": cost.a, "b": cost.b},
        "requests": [
            {
                "id": request.id,
                "arrival_h": request.arrival.hours,
                "deadline_h": request.deadline.hours,
                "demand_kwh": request.demand,
                "max_rate_kw": request.max_rate,
                "capacity_kwh": request.capacity,
            }
            for request in requests],
    }
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
