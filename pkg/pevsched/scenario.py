"""
Stochastic charging days and the replication harness that compares the
online algorithms against the offline optimum.

A scenario splits the day into segments, each with a Poisson arrival rate
and a mean parking time. Every arriving PEV picks a type (max rate and
battery capacity), parks for an exponential time and asks for a demand
drawn uniformly between zero and what it could possibly take.

The three built in scenarios only differ in the two peak hours around
noon and in the evening: light, moderate and heavy traffic.
::

    config = scenario_config(3)
    requests = generate_instance(config, seed=7)
    result = run_replication(config, 7, ['orchard', 'oa'])
    result.ratios
"""
import json
import logging
import collections
import multiprocessing

import numpy as np
import pandas as pd

from pevsched.model import (
    MILLIHOURS, ChargingRequest, CostModel, TimeStamp, ModelError,
    evaluate_cost)
from pevsched.offline import OfflineSolver
from pevsched.online import (
    ALGORITHMS, DEFAULT_Q, AlgorithmKind, OnlineEngine)

# Ratios below this mean the offline solution was not optimal.
RATIO_FLOOR = 1 - 1e-9

class ConfigError(Exception):
    """
    A scenario config is malformed. The message names the field.
    """
    pass

Segment = collections.namedtuple(
    "Segment", ["start_h", "end_h", "arrival_rate", "mean_parking_h"])

PevType = collections.namedtuple(
    "PevType", ["max_rate_kw", "capacity_kwh", "probability"])

class ScenarioConfig():
    """
    Parameters of a simulated day.

    :param segments: Segments covering [0, horizon_h) in order.
    :param pev_types: PEV types with probabilities summing to 1.
    :param cost: CostModel, the default coefficients if None.
    :param horizon_h: Length of the arrival day in hours. Departures may
        fall after it.
    :param name: Label used in logs and manifests.
    """
    def __init__(
            self, segments, pev_types, cost=None, horizon_h=24.0, name=None):
        self.segments = [Segment(*s) for s in segments]
        self.pev_types = [PevType(*t) for t in pev_types]
        self.cost = cost or CostModel()
        self.horizon_h = float(horizon_h)
        self.name = name or "custom"
        self._validate()

    def _validate(self):
        if not self.segments:
            raise ConfigError("segments: at least one segment is needed")
        expected = 0.0
        for n, segment in enumerate(self.segments):
            where = "segments[{}]".format(n)
            if segment.start_h != expected:
                raise ConfigError(
                    "{}.start_h: expected {}, got {}".format(
                        where, expected, segment.start_h))
            if segment.end_h <= segment.start_h:
                raise ConfigError("{}.end_h: must be after start_h".format(
                    where))
            if segment.arrival_rate < 0:
                raise ConfigError("{}.arrival_rate: must be >= 0".format(
                    where))
            if segment.mean_parking_h < 0 or (
                    segment.arrival_rate > 0 and segment.mean_parking_h <= 0):
                raise ConfigError(
                    "{}.mean_parking_h: must be > 0 when PEVs arrive".format(
                        where))
            expected = segment.end_h
        if expected != self.horizon_h:
            raise ConfigError(
                "segments: cover [0, {}) but horizon_h is {}".format(
                    expected, self.horizon_h))

        if not self.pev_types:
            raise ConfigError("pev_types: at least one type is needed")
        for n, pev_type in enumerate(self.pev_types):
            where = "pev_types[{}]".format(n)
            if pev_type.max_rate_kw <= 0:
                raise ConfigError("{}.max_rate_kw: must be > 0".format(where))
            if pev_type.capacity_kwh <= 0:
                raise ConfigError("{}.capacity_kwh: must be > 0".format(where))
            if pev_type.probability < 0:
                raise ConfigError("{}.probability: must be >= 0".format(where))
        total = sum(t.probability for t in self.pev_types)
        if abs(total - 1) > 1e-9:
            raise ConfigError(
                "pev_types: probabilities sum to {}, not 1".format(total))

    @property
    def probabilities(self):
        return np.array([t.probability for t in self.pev_types])

    @classmethod
    def from_dict(cls, data, source="<config>"):
        """
        Build a config from its JSON form, see ``to_dict()``.
        """
        def field(obj, name, where):
            if not isinstance(obj, dict) or name not in obj:
                raise ConfigError("{}: missing field '{}'".format(where, name))
            return obj[name]

        try:
            segments = [
                Segment(*[
                    float(field(s, name, "segments[{}]".format(n)))
                    for name in Segment._fields])
                for n, s in enumerate(field(data, "segments", "config"))]
            pev_types = [
                PevType(*[
                    float(field(t, name, "pev_types[{}]".format(n)))
                    for name in PevType._fields])
                for n, t in enumerate(field(data, "pev_types", "config"))]
            cost_data = data.get("cost", {})
            cost = CostModel(**cost_data)
            return cls(
                segments, pev_types, cost, data.get("horizon_h", 24.0),
                data.get("name"))
        except (TypeError, ValueError, ModelError, ConfigError) as e:
            raise ConfigError("{}: {}".format(source, e))

    def to_dict(self):
        return {
            "name": self.name,
            "horizon_h": self.horizon_h,
            "cost": {"a": self.cost.a, "b": self.cost.b},
            "segments": [s._asdict() for s in self.segments],
            "pev_types": [t._asdict() for t in self.pev_types],
        }

    def __str__(self):
        return "ScenarioConfig({}, {} segments, {} PEV types)".format(
            self.name, len(self.segments), len(self.pev_types))

# Peak hour arrival rates of the built in scenarios.
_PEAK_RATES = {1: 10.0, 2: 30.0, 3: 50.0}

def scenario_config(n):
    """
    Built in scenario ``n`` (1 light, 2 moderate, 3 heavy traffic).
    """
    if n not in _PEAK_RATES:
        raise ConfigError("unknown scenario {}, expected 1, 2 or 3".format(n))
    peak = _PEAK_RATES[n]
    segments = [
        Segment(0.0, 8.0, 0.0, 0.0),
        Segment(8.0, 10.0, 7.0, 10.0),
        Segment(10.0, 12.0, 5.0, 0.5),
        Segment(12.0, 14.0, peak, 2.0),
        Segment(14.0, 18.0, 5.0, 0.5),
        Segment(18.0, 20.0, peak, 2.0),
        Segment(20.0, 24.0, 5.0, 10.0),
    ]
    pev_types = [PevType(3.3, 35.0, 0.5), PevType(1.4, 16.0, 0.5)]
    return ScenarioConfig(
        segments, pev_types, CostModel(), 24.0, "scenario{}".format(n))

def load_scenario(path):
    """
    Read a scenario config from a JSON file, or resolve one of the names
    ``scenario1`` .. ``scenario3``.
    """
    name = str(path)
    if name in ("scenario1", "scenario2", "scenario3"):
        return scenario_config(int(name[-1]))
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError("{}: {}".format(path, e.strerror))
    except json.JSONDecodeError as e:
        raise ConfigError("{}: line {} column {}: {}".format(
            path, e.lineno, e.colno, e.msg))
    return ScenarioConfig.from_dict(data, source=name)

def generate_instance(config, seed):
    """
    Draw one day of charging requests. The result only depends on
    ``config`` and ``seed``.

    :returns: Requests ordered by arrival, ids 1, 2, ...
    """
    rng = np.random.default_rng(seed)
    arrivals = []
    for segment in config.segments:
        if segment.arrival_rate <= 0:
            continue
        t = segment.start_h
        while True:
            t += rng.exponential(1.0 / segment.arrival_rate)
            if t >= segment.end_h:
                break
            arrivals.append((t, segment))

    probabilities = config.probabilities
    requests = []
    for n, (t, segment) in enumerate(arrivals):
        pev_type = config.pev_types[
            rng.choice(len(config.pev_types), p=probabilities)]
        parking = rng.exponential(segment.mean_parking_h)
        arrival = TimeStamp.from_hours(t)
        window = max(1, int(round(parking * MILLIHOURS)))
        deadline = arrival + window
        most = min(
            pev_type.max_rate_kw * window / MILLIHOURS, pev_type.capacity_kwh)
        demand = rng.uniform(0.0, most)
        requests.append(ChargingRequest(
            n + 1, arrival, deadline, demand, pev_type.max_rate_kw,
            pev_type.capacity_kwh))
    return requests

def _kinds(algorithms, q):
    kinds = []
    for algorithm in algorithms:
        if isinstance(algorithm, AlgorithmKind):
            kinds.append(algorithm)
        else:
            kinds.append(AlgorithmKind.parse(algorithm, q))
    return kinds

class ReplicationResult():
    """
    Costs of one simulated day.

    :param seed: Seed of the instance.
    :param costs: AlgorithmKind -> online cost ($).
    :param offline_cost: Cost of the offline optimum ($).
    :param requests: Number of PEVs of the day.
    """
    def __init__(self, seed, costs, offline_cost, requests=0):
        self.seed = seed
        self.costs = dict(costs)
        self.offline_cost = offline_cost
        self.requests = requests

    @property
    def ratios(self):
        """
        Online over offline cost per algorithm, 1 for an empty day.
        """
        if self.offline_cost <= 0:
            return {kind: 1.0 for kind in self.costs}
        return {
            kind: cost / self.offline_cost for kind, cost in self.costs.items()}

    def rows(self):
        ratios = self.ratios
        return [
            {
                "seed": self.seed,
                "algorithm": kind.name,
                "q": kind.q,
                "cost": cost,
                "offline_cost": self.offline_cost,
                "ratio": ratios[kind],
            }
            for kind, cost in self.costs.items()]

    def __str__(self):
        return "seed {}: {} PEVs, offline {:.6g} $, {}".format(
            self.seed, self.requests, self.offline_cost,
            ", ".join("{} {:.4f}".format(k, r) for k, r in self.ratios.items()))

def replicate(requests, cost, kinds, seed=None):
    """
    Offline optimum and every online algorithm on one instance.

    :returns: ReplicationResult.
    """
    solver = OfflineSolver()
    offline = solver.solve(requests)
    offline_cost = evaluate_cost(offline, solver.decomposition, cost)
    costs = collections.OrderedDict()
    for kind in kinds:
        costs[kind] = OnlineEngine(requests, cost, kind).run().cost
    result = ReplicationResult(seed, costs, offline_cost, len(requests))

    logger = logging.getLogger('pevsched.scenario.replication')
    for kind, ratio in result.ratios.items():
        if ratio < RATIO_FLOOR:
            logger.error("seed {}: {} beat the offline optimum ({:.12f})".format(
                seed, kind, ratio))
    logger.debug(str(result))
    return result

def run_replication(config, seed, algorithms=ALGORITHMS, q=DEFAULT_Q):
    """
    Generate the instance of ``seed`` and compare the algorithms on it.

    :param algorithms: Algorithm names or AlgorithmKinds.
    :param q: Speed-up factor for algorithms given by name.
    :returns: ReplicationResult.
    """
    requests = generate_instance(config, seed)
    return replicate(requests, config.cost, _kinds(algorithms, q), seed)

def _replication_task(args):
    config, seed, algorithms, q = args
    return run_replication(config, seed, algorithms, q)

def _map(function, tasks, processes):
    if processes and processes > 1 and len(tasks) > 1:
        with multiprocessing.Pool(processes=processes) as pool:
            return pool.map(function, tasks)
    return [function(task) for task in tasks]

def run_replications(
        config, seeds, algorithms=ALGORITHMS, q=DEFAULT_Q, processes=1):
    """
    One replication per seed, in parallel when ``processes`` > 1.

    :returns: List of ReplicationResult ordered by seed.
    """
    logger = logging.getLogger('pevsched.scenario.replication')
    seeds = sorted(seeds)
    logger.info("{}: {} replications of {} on {} processes".format(
        config.name, len(seeds), ", ".join(str(a) for a in algorithms),
        processes))
    tasks = [(config, seed, list(algorithms), q) for seed in seeds]
    results = _map(_replication_task, tasks, processes)
    return sorted(results, key=lambda result: result.seed)

def results_frame(results):
    """
    One row per (replication, algorithm): seed, algorithm, q, cost,
    offline_cost, ratio.
    """
    rows = [row for result in results for row in result.rows()]
    columns = ["seed", "algorithm", "q", "cost", "offline_cost", "ratio"]
    return pd.DataFrame(rows, columns=columns)

def aggregate_ratios(results):
    """
    Mean ratio and its standard error per (algorithm, q).

    :param results: ReplicationResults, in any order.
    :returns: DataFrame with algorithm, q, replications, mean_ratio,
        stderr and max_ratio, in algorithm order.
    """
    frame = results_frame(results)
    grouped = frame.groupby(["algorithm", "q"], sort=False)["ratio"]
    summary = grouped.agg(["count", "mean", "std", "max"]).reset_index()
    summary["std"] = summary["std"].fillna(0.0)
    summary["stderr"] = summary["std"] / np.sqrt(summary["count"])
    summary = summary.rename(columns={
        "count": "replications", "mean": "mean_ratio", "max": "max_ratio"})
    order = {name: n for n, name in enumerate(ALGORITHMS)}
    summary = summary.sort_values(
        ["algorithm", "q"], key=lambda column: column.map(order)
        if column.name == "algorithm" else column)
    return summary[
        ["algorithm", "q", "replications", "mean_ratio", "stderr",
         "max_ratio"]].reset_index(drop=True)

class SweepResult():
    """
    Mean ORCHARD ratio per speed-up factor.

    :param frame: DataFrame with q, mean_ratio and stderr per q.
    """
    def __init__(self, frame):
        self.frame = frame

    @property
    def ratios(self):
        return dict(zip(self.frame["q"], self.frame["mean_ratio"]))

    @property
    def best_q(self):
        return float(self.frame.loc[self.frame["mean_ratio"].idxmin(), "q"])

    @property
    def best_ratio(self):
        return float(self.frame["mean_ratio"].min())

def _sweep_task(args):
    config, seed, q_values = args
    kinds = [AlgorithmKind.orchard(q) for q in q_values]
    result = run_replication(config, seed, kinds)
    return result.ratios

def q_sweep(config, q_values, replications, seed_base=0, processes=1):
    """
    Mean ORCHARD ratio for every q in ``q_values``. All q share the same
    instances, seeds ``seed_base`` .. ``seed_base + replications - 1``.

    :returns: SweepResult.
    """
    q_values = [float(q) for q in q_values]
    for q in q_values:
        if not 1 <= q <= 5:
            raise ValueError("q must be in [1, 5], got {}".format(q))
    seeds = range(seed_base, seed_base + replications)
    tasks = [(config, seed, q_values) for seed in seeds]
    per_seed = _map(_sweep_task, tasks, processes)

    ratios = np.array([
        [ratios[AlgorithmKind.orchard(q)] for q in q_values]
        for ratios in per_seed])
    count = len(per_seed)
    stderr = (
        ratios.std(axis=0, ddof=1) / np.sqrt(count) if count > 1
        else np.zeros(len(q_values)))
    frame = pd.DataFrame({
        "q": q_values, "mean_ratio": ratios.mean(axis=0), "stderr": stderr})

    logger = logging.getLogger('pevsched.scenario.sweep')
    result = SweepResult(frame)
    logger.info("{}: best q {:g} with mean ratio {:.4f}".format(
        config.name, result.best_q, result.best_ratio))
    return result

def _profile_task(args):
    config, seed, kinds = args
    requests = generate_instance(config, seed)
    solver = OfflineSolver()
    schedules = {"offline": (solver.solve(requests), solver.decomposition)}
    for kind in kinds:
        result = OnlineEngine(requests, config.cost, kind).run()
        schedules[kind.name] = (result.schedule, result.decomposition)
    return {
        label: (
            np.array([t.hours for t in decomp.boundaries]),
            np.array(schedule.totals))
        for label, (schedule, decomp) in schedules.items()}

def binned_load(boundaries, totals, edges):
    """
    Average total rate in each bin [edges[j], edges[j + 1]) of a piecewise
    constant profile.
    """
    if len(totals) == 0:
        return np.zeros(len(edges) - 1)
    starts = boundaries[:-1]
    ends = boundaries[1:]
    overlap = np.clip(
        np.minimum(ends[:, None], edges[None, 1:]) -
        np.maximum(starts[:, None], edges[None, :-1]), 0.0, None)
    return (totals @ overlap) / np.diff(edges)

def load_profile(
        config, seeds, algorithms=ALGORITHMS, q=DEFAULT_Q, resolution_h=0.25,
        processes=1):
    """
    Mean total charging rate over the day for the offline optimum and
    each algorithm, averaged over ``seeds``.

    :returns: DataFrame with an ``hour`` column (bin start) and one column
        per schedule.
    """
    kinds = _kinds(algorithms, q)
    tasks = [(config, seed, kinds) for seed in sorted(seeds)]
    profiles = _map(_profile_task, tasks, processes)

    end = config.horizon_h
    for profile in profiles:
        for boundaries, _ in profile.values():
            if len(boundaries):
                end = max(end, boundaries[-1])
    bins = int(np.ceil(end / resolution_h))
    edges = np.arange(bins + 1) * resolution_h

    labels = ["offline"] + [kind.name for kind in kinds]
    frame = pd.DataFrame({"hour": edges[:-1]})
    for label in labels:
        loads = [
            binned_load(*profile[label], edges) for profile in profiles]
        frame[label] = np.mean(loads, axis=0) if loads else 0.0
    return frame

# Peak to flat arrival ratio -> speed-up factor, from the sweeps of the
# built in scenarios. No peak keeps the worst case optimal factor.
_Q_TABLE = ([1.0, 2.0, 6.0, 10.0], [DEFAULT_Q, 1.8, 2.1, 2.3])

def suggest_q(config):
    """
    Speed-up factor for a scenario, from how much busier its busiest
    segment is than its quietest non-empty one.
    """
    rates = [s.arrival_rate for s in config.segments if s.arrival_rate > 0]
    if not rates:
        return DEFAULT_Q
    return float(np.interp(max(rates) / min(rates), *_Q_TABLE))
