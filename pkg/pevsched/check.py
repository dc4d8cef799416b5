"""
Property suites run over many random instances.

Each suite is a block of plain ``assert`` statements executed once per
instance. Failing asserts do not stop the run: they are collected, and
once every instance has been tried they are combined into one
``ConditionsNotMetError`` together with the seeds that failed, so a
failure can be replayed with ``random_instance(seed)``.
::

    check = Check('kkt')
    for seed in check.cases(range(200)):
        with check.conditions:
            requests = random_instance(seed)
            ...
            assert report.passed, "seed {}: {}".format(seed, report)

When the same ``assert`` fails for consecutive cases with a message that
only differs in its numbers (the seed, a measured gap), the block is
reported once. Any other exception is not captured and propagates as
usual.
"""
import re
import logging
import traceback

import numpy as np

from pevsched.model import (
    MILLIHOURS, ChargingRequest, CostModel, TimeStamp, evaluate_cost,
    validate_schedule)
from pevsched.offline import (
    KKT_TOL, OfflineSolver, oracle_solve, verify_kkt)
from pevsched.online import (
    DEFAULT_Q, AlgorithmKind, EngineFault, OnlineEngine)

SUITES = ('kkt', 'oracle', 'online-invariants')

# Worst case ratio ORCHARD is proven to stay under at q = 1.46.
COMPETITIVE_BOUND = 2.39

# Largest relative cost gap tolerated between the solver and the oracle.
ORACLE_GAP = 1e-3

class ConditionsNotMetError(Exception):
    """
    Error raised when some instances of a suite failed.

    :param seeds: Seeds of the failing instances.
    """
    def __init__(self, message, seeds=()):
        self.seeds = [s for s in seeds]
        super().__init__(message)

class Check():
    """
    Collects the failures of one suite and the worst value seen of each
    tracked quantity.

    :param name: Suite name for messages.
    """
    def __init__(self, name):
        self.name = name
        self.seed = None
        self.case = None
        self.worst = {}
        self.conditions = _ConditionsBlock(self)

    def record(self, quantity, value):
        """
        Remember ``value`` of ``quantity`` if it is the largest so far.
        """
        value = float(value)
        if quantity not in self.worst or value > self.worst[quantity][0]:
            self.worst[quantity] = (value, self.seed)

    def cases(self, seeds):
        """
        Iterate the seeds to check. After the last one, raise
        ConditionsNotMetError if any case failed.
        """
        self.conditions.reset()
        for case, seed in enumerate(seeds):
            self.case = case
            self.seed = seed
            yield seed
        self.seed = None
        self.case = None
        if self.conditions.suppressed:
            self.conditions._conditions_failed()

    def summary(self):
        lines = ["{}: worst case".format(self.name)]
        for quantity, (value, seed) in sorted(self.worst.items()):
            lines.append("  {:<28} {:.3e} (seed {})".format(
                quantity, value, seed))
        return "\n".join(lines)

# Hex addresses and numbers, which differ from one case to the next.
_VARYING = re.compile(r"0x[0-9a-fA-F]+|\d+(\.\d*)?([eE][-+]?\d+)?")

def _failure_site(exception):
    """
    File, line and message of where an assertion was raised, with the
    numbers of the message masked.
    """
    tb = exception.__traceback__
    while tb.tb_next is not None:
        tb = tb.tb_next
    return (
        tb.tb_frame.f_code.co_filename, tb.tb_lineno,
        _VARYING.sub("#", str(exception)))

class _ConditionsBlock():
    """
    Context manager to suppress ``AssertionError`` exceptions so every
    case of a suite gets run.
    """
    def __init__(self, check):
        self.check = check
        self.reset()

    def reset(self):
        self.suppressed = []
        self.failed_seeds = []
        self._last_case = None

    def _add_suppressed(self, exception):
        """
        Remember a failed assertion and the seed it failed for. A failure
        raised from the same place with the same message, numbers aside,
        as the failure of the case just before is only kept once.
        """
        if self.check.seed not in self.failed_seeds:
            self.failed_seeds.append(self.check.seed)

        case = self.check.case
        repeated = (
            self.suppressed and self._last_case is not None and
            case - self._last_case <= 1 and
            _failure_site(self.suppressed[-1]) == _failure_site(exception))
        self._last_case = case
        if repeated:
            return
        self.suppressed.append(exception)

    def _conditions_failed(self):
        """
        Raise a ConditionsNotMetError combining every suppressed failure.
        """
        msg = []
        for exception in self.suppressed:
            tb = exception.__traceback__
            msg += traceback.format_exception(
                type(exception), exception, tb)
        seeds = self.failed_seeds
        msg.append("{}: {} case(s) failed, seeds {}\n".format(
            self.check.name, len(seeds), seeds))

        self.reset()
        raise ConditionsNotMetError(''.join(msg), seeds)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        if exc_type and issubclass(exc_type, AssertionError):
            logger = logging.getLogger('pevsched.check')
            logger.debug("{} seed {}: {}".format(
                self.check.name, self.check.seed, exc_value))
            self._add_suppressed(exc_value)
            return True
        return False

def random_instance(seed, max_requests=10, horizon_h=12.0):
    """
    Small random instance for property checks. Times sit on a quarter
    hour grid so windows often share boundaries.

    :returns: List of feasible ChargingRequests, at least one.
    """
    rng = np.random.default_rng(seed)
    quarter = MILLIHOURS // 4
    count = int(rng.integers(1, max_requests + 1))
    requests = []
    for n in range(count):
        arrival = TimeStamp(int(rng.integers(0, int(horizon_h * 4))) * quarter)
        window = int(rng.integers(1, 33)) * quarter
        max_rate = float(rng.choice([1.4, 3.3, rng.uniform(0.5, 4.0)]))
        capacity = float(rng.uniform(5.0, 40.0))
        request = ChargingRequest(
            n + 1, arrival, arrival + window, 0.0, max_rate, capacity)
        demand = float(rng.uniform(0.0, request.max_energy))
        requests.append(request._replace(demand=demand))
    return requests

def kkt_suite(seeds, max_requests=10, tol=KKT_TOL):
    """
    Offline solutions are feasible, pass the KKT check and have
    non-increasing peaks.
    """
    check = Check('kkt')
    for seed in check.cases(seeds):
        with check.conditions:
            requests = random_instance(seed, max_requests)
            solver = OfflineSolver(tol=tol)
            schedule = solver.solve(requests)
            decomp = solver.decomposition

            report = validate_schedule(schedule, requests, decomp)
            check.record("demand shortfall (kWh)", report.max_shortfall)
            assert report.feasible, "seed {}: {}".format(seed, report)

            kkt = verify_kkt(schedule, requests, decomp, tol)
            check.record("KKT violation (kW)", kkt.worst)
            assert kkt.passed, "seed {}: {}".format(seed, kkt)

            rises = np.diff(solver.peaks) if len(solver.peaks) > 1 else [0.0]
            check.record("peak increase (kW)", max(0.0, np.max(rises)))
            assert np.max(rises) <= 1e-9, (
                "seed {}: peaks not monotone {}".format(seed, solver.peaks))
    return check

def oracle_suite(seeds, max_requests=8, gap=ORACLE_GAP):
    """
    Offline solutions cost the same as the oracle's, within ``gap``.
    """
    cost = CostModel()
    check = Check('oracle')
    for seed in check.cases(seeds):
        with check.conditions:
            requests = random_instance(seed, max_requests)
            solver = OfflineSolver()
            schedule = solver.solve(requests)
            ours = evaluate_cost(schedule, solver.decomposition, cost)
            reference = oracle_solve(requests, cost)
            theirs = evaluate_cost(reference, reference.decomposition, cost)
            relative = abs(ours - theirs) / max(theirs, 1e-12)
            check.record("relative cost gap", relative)
            assert relative <= gap, (
                "seed {}: solver {:.9g} $, oracle {:.9g} $".format(
                    seed, ours, theirs))
    return check

def online_suite(seeds, max_requests=10, q=DEFAULT_Q):
    """
    Every online algorithm meets every demand and costs at least the
    offline optimum. ORCHARD never slows a PEV below OA, hits its target
    total exactly, matches OA at q = 1 and stays under the competitive
    bound.
    """
    cost = CostModel()
    oa = AlgorithmKind.oa()
    orchard = AlgorithmKind.orchard(q)
    plain = AlgorithmKind.orchard(1.0)
    kinds = [oa, orchard, plain, AlgorithmKind.avg(), AlgorithmKind.eg()]

    check = Check('online-invariants')
    for seed in check.cases(seeds):
        with check.conditions:
            requests = random_instance(seed, max_requests)
            by_id = {r.id: r for r in requests}
            solver = OfflineSolver()
            offline = evaluate_cost(
                solver.solve(requests), solver.decomposition, cost)

            results = {}
            for kind in kinds:
                try:
                    results[kind] = OnlineEngine(requests, cost, kind).run()
                except EngineFault as e:
                    raise AssertionError("seed {}: {} failed: {}".format(
                        seed, kind, e))
                report = validate_schedule(
                    results[kind].schedule, requests,
                    results[kind].decomposition)
                check.record("online shortfall (kWh)", report.max_shortfall)
                assert report.feasible, "seed {}: {} {}".format(
                    seed, kind, report)
                below = offline - results[kind].cost
                check.record("online below offline ($)", below)
                assert below <= 1e-9, (
                    "seed {}: {} cost {:.12g} below offline {:.12g}".format(
                        seed, kind, results[kind].cost, offline))

            for decision in results[orchard].decisions:
                ids = sorted(decision.oa)
                slower = max(decision.oa[i] - decision.rates[i] for i in ids)
                check.record("dominance violation (kW)", slower)
                assert slower <= 1e-9, "seed {}: ORCHARD below OA at {}".format(
                    seed, decision.time)

                target = min(
                    q * sum(decision.oa.values()),
                    sum(by_id[i].max_rate for i in ids))
                miss = abs(sum(decision.rates.values()) - target)
                check.record("conservation error (kW)", miss)
                assert miss <= 1e-9 * max(1.0, target), (
                    "seed {}: ORCHARD total off by {} at {}".format(
                        seed, miss, decision.time))

            same = (
                [(d.time, d.rates) for d in results[oa].decisions] ==
                [(d.time, d.rates) for d in results[plain].decisions])
            assert same, "seed {}: ORCHARD(q=1) differs from OA".format(seed)

            if offline > 0:
                ratio = results[orchard].cost / offline
                check.record("ORCHARD ratio", ratio)
                assert ratio <= COMPETITIVE_BOUND, (
                    "seed {}: ORCHARD ratio {:.4f}".format(seed, ratio))
    return check

def run_suite(name, count, seed=0, max_requests=None):
    """
    Run suite ``name`` on seeds ``seed`` .. ``seed + count - 1``.

    :returns: The Check with the worst values seen.
    :raises ConditionsNotMetError: Some instances failed.
    """
    suites = {
        'kkt': kkt_suite,
        'oracle': oracle_suite,
        'online-invariants': online_suite,
    }
    if name not in suites:
        raise ValueError("unknown suite '{}', expected one of {}".format(
            name, ", ".join(SUITES)))
    seeds = range(seed, seed + count)
    if max_requests is None:
        return suites[name](seeds)
    return suites[name](seeds, max_requests)
