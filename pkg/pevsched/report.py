"""
Writers for everything the command line produces: schedules as JSON,
online traces, replication results and sweeps as CSV, and the run
manifest that goes alongside them.

Files are written in a fixed order with fixed float formatting, so running
the same command with the same seed twice gives identical files.
"""
import os
import json
import collections

import pandas as pd

import pevsched

# Float format of every CSV, enough digits to tell ratios apart.
FLOAT_FORMAT = "%.10g"

RESULT_COLUMNS = ["seed", "algorithm", "q", "cost", "offline_cost", "ratio"]

class RunManifest(collections.namedtuple("RunManifest", [
        "command", "config", "seeds", "algorithms", "q", "out",
        "version", "extra"])):
    """
    Everything needed to re-run a command. Written as ``manifest.json``
    next to its outputs.
    """
    __slots__ = ()

    def __new__(cls, command, config=None, seeds=(), algorithms=(), q=None,
            out=None, version=None, extra=None):
        return super().__new__(
            cls, command, config, list(seeds), list(algorithms), q, out,
            version or pevsched.__version__, dict(extra or {}))

    def to_dict(self):
        return dict(self._asdict())

def write_manifest(out_dir, manifest):
    """
    Write ``manifest.json`` into ``out_dir``.

    :returns: Path written.
    """
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path

def schedule_document(schedule, cost, kkt=None):
    """
    Plain dict form of a solved instance: intervals, total cost and the
    KKT report if there is one.
    """
    document = {
        "intervals": schedule.intervals(),
        "total_cost": cost,
    }
    if kkt is not None:
        document["kkt"] = {
            "passed": kkt.passed,
            "max_balance_violation": kkt.max_balance_violation,
            "max_zero_rate_violation": kkt.max_zero_rate_violation,
            "max_cap_rate_violation": kkt.max_cap_rate_violation,
            "tol": kkt.tol,
        }
    return document

def write_schedule(path, schedule, cost, kkt=None):
    """
    Write a schedule as JSON.

    :param schedule: RateSchedule.
    :param cost: Its cost ($).
    :param kkt: Optional KktReport.
    """
    with open(path, "w") as f:
        json.dump(
            schedule_document(schedule, cost, kkt), f, indent=2,
            sort_keys=True)
        f.write("\n")

def trace_frame(result):
    """
    One row per executed span of an online run.
    """
    rows = []
    for span in result.trace:
        rows.append({
            "t_start_h": span.start.hours,
            "t_end_h": span.end.hours,
            "total_kw": sum(span.rates.values()),
            "rates": json.dumps(
                {str(i): span.rates[i] for i in sorted(span.rates)}),
        })
    return pd.DataFrame(
        rows, columns=["t_start_h", "t_end_h", "total_kw", "rates"])

def write_trace(path, result):
    """
    Write the execution trace of an OnlineResult as CSV, with a summary
    of the run as the first, commented line.
    """
    with open(path, "w") as f:
        f.write("# algorithm={} q={:g} total_cost={!r}\n".format(
            result.algorithm.name, result.algorithm.q, result.cost))
        trace_frame(result).to_csv(
            f, index=False, float_format=FLOAT_FORMAT)

def write_results(out_dir, results_frame, summary_frame):
    """
    Write ``results.csv`` (one row per replication and algorithm) and
    ``summary.csv`` (one row per algorithm) into ``out_dir``.

    :returns: (results path, summary path).
    """
    results_path = os.path.join(out_dir, "results.csv")
    summary_path = os.path.join(out_dir, "summary.csv")
    results_frame[RESULT_COLUMNS].to_csv(
        results_path, index=False, float_format=FLOAT_FORMAT)
    summary_frame.to_csv(summary_path, index=False, float_format=FLOAT_FORMAT)
    return results_path, summary_path

def write_frame(path, frame):
    """
    Write any result frame (sweep, load profile) as CSV.
    """
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path
