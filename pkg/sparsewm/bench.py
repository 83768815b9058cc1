# bench.py -
#   runs planning benchmarks: success rate and planning time per
#   (strategy, drop ratio) cell, compared against the full-token baseline,
#   and writes the result tables and the run manifest.
#

import csv
import io
import json
import os
import time
from dataclasses import dataclass, asdict, fields, replace
from statistics import mean

from sparsewm import planner, worldmodel
from sparsewm.envsim import EnvConfig
from sparsewm.errors import ConfigError, DegenerateInputError, FormatError
from sparsewm.logger import log
from sparsewm.planner import PlanConfig
from sparsewm._version import __version__

EPISODE_COLUMNS = ('episode', 'strategy', 'p', 'success', 'mpc_iters', 'plan_seconds_per_iter',
                   'forward_calls', 'final_distance', 'valid')


@dataclass
class RunConfig:
    env: EnvConfig
    plan: PlanConfig
    checkpoint: str
    strategies: list
    drop_ratios: list
    episodes: int = 30
    seed: int = 0
    out: str = 'bench'
    workers: int = 1
    timing_serial: bool = False

    def __post_init__(self):
        for p in self.drop_ratios:
            if not 0.0 <= p < 1.0:
                raise ConfigError("drop ratio %r is outside [0, 1)" % p)
        if self.episodes < 1:
            raise ConfigError("a benchmark cell needs at least one episode")

    def cells(self):
        '''(strategy, p) pairs to run, starting with the full-token row'''
        out = [('full', 0.0)]
        for s in self.strategies:
            for p in self.drop_ratios:
                if s == 'full' or (s, p) in out:
                    continue
                out.append((s, float(p)))
        return out


@dataclass
class BenchRecord:
    strategy: str
    p: float
    success_rate: float
    plan_seconds: float      # mean planning time per MPC iteration
    change_pct: float        # vs the full row of the same run
    forward_calls: int
    episodes: int
    invalid: int = 0         # aborted episodes, counted as failures


def episode_rows(outcomes, strategy, p):
    return [{'episode': i, 'strategy': strategy, 'p': p, 'success': int(o.success),
             'mpc_iters': o.mpc_iters, 'plan_seconds_per_iter': o.plan_seconds_per_iter,
             'forward_calls': o.forward_calls, 'final_distance': o.final_distance,
             'valid': int(o.valid)}
            for i, o in enumerate(outcomes)]


def write_rows(path, rows, columns=EPISODE_COLUMNS):
    '''CSV of dict rows restricted to the given columns, written atomically'''
    try:
        with open(path + ".tmp", 'w', newline='') as f:
            w = csv.DictWriter(f, fieldnames=columns, extrasaction='ignore')
            w.writeheader()
            w.writerows(rows)
        os.replace(path + ".tmp", path)
    except OSError as e:
        raise FormatError("Failed to write " + path + ": " + str(e.strerror))
    log("Wrote " + path + ".")


def summarize(outcomes, strategy, p):
    '''BenchRecord for one cell; change_pct is filled in by run_bench'''
    if not outcomes:
        raise DegenerateInputError("cell %s/%.2f has no episodes" % (strategy, p))
    timed = [o.plan_seconds_per_iter for o in outcomes if o.valid and o.plan_seconds]
    return BenchRecord(strategy=strategy, p=p,
                       success_rate=mean(float(o.valid and o.success) for o in outcomes),
                       plan_seconds=mean(timed) if timed else 0.0, change_pct=0.0,
                       forward_calls=sum(o.forward_calls for o in outcomes), episodes=len(outcomes),
                       invalid=sum(not o.valid for o in outcomes))


def run_bench(cfg, params=None, manifest=None):
    '''runs every cell of the benchmark and writes bench.csv, bench.json and
    manifest.json to cfg.out. params default to the checkpoint, which must
    exist before anything runs. returns the BenchRecords.'''
    if params is None:
        if not cfg.checkpoint or not os.path.isfile(cfg.checkpoint):
            raise ConfigError("checkpoint not found: " + repr(cfg.checkpoint))
        params, _ = worldmodel.ModelParams.load(cfg.checkpoint)
    workers = 1 if cfg.timing_serial else cfg.workers
    records = []
    episodes = []
    for strategy, p in cfg.cells():
        plan_cfg = replace(cfg.plan, strategy=strategy, drop_ratio=p)
        log("Running %d episodes: strategy %s, p=%.2f." % (cfg.episodes, strategy, p))
        t0 = time.perf_counter()
        outcomes = planner.evaluate(params, cfg.env, plan_cfg, cfg.episodes, cfg.seed, workers=workers)
        rec = summarize(outcomes, strategy, p)
        records.append(rec)
        episodes.extend(episode_rows(outcomes, strategy, p))
        log("  success %.3f, %.4f s/iter, %d aborted (%.1f s total)"
            % (rec.success_rate, rec.plan_seconds, rec.invalid, time.perf_counter() - t0))
    base = records[0].plan_seconds
    for rec in records[1:]:
        rec.change_pct = 100.0 * (rec.plan_seconds - base) / base if base > 0 else 0.0
    write_results(cfg.out, records, episodes, manifest or {})
    return records


def write_results(out, records, episodes, manifest):
    os.makedirs(out, exist_ok=True)
    text, table = report(records)
    artifacts = {
        'bench.csv': table,
        'bench.json': json.dumps({'records': [asdict(r) for r in records], 'episodes': episodes},
                                 indent=4),
        'manifest.json': json.dumps(dict(manifest, version=__version__), indent=4, sort_keys=True),
    }
    try:
        for name, body in artifacts.items():
            path = os.path.join(out, name)
            with open(path + ".tmp", 'w') as f:
                f.write(body)
            os.replace(path + ".tmp", path)
    except OSError as e:
        raise FormatError("Failed to write results to " + out + ": " + str(e.strerror))
    log("Results:\n" + text)


def report(records):
    '''returns (aligned text table, CSV) for the records'''
    if not records:
        raise DegenerateInputError("no benchmark records to report")
    names = [f.name for f in fields(BenchRecord)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator='\n')
    w.writerow(names)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])

    head = "%-10s %5s %8s %12s %9s %14s %8s %7s" % ('strategy', 'p', 'success', 'plan s/iter',
                                                    'change %', 'forward calls', 'episodes', 'invalid')
    lines = [head, '-' * len(head)]
    for r in records:
        lines.append("%-10s %5.2f %8.3f %12.5f %9.1f %14d %8d %7d"
                     % (r.strategy, r.p, r.success_rate, r.plan_seconds, r.change_pct,
                        r.forward_calls, r.episodes, r.invalid))
    return '\n'.join(lines), buf.getvalue()


def read_csv(text):
    '''parses the CSV written by report() back into BenchRecords'''
    types = {f.name: f.type for f in fields(BenchRecord)}
    conv = {'str': str, 'float': float, 'int': int, str: str, float: float, int: int}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        try:
            out.append(BenchRecord(**{k: conv[types[k]](v) for k, v in row.items()}))
        except (KeyError, ValueError) as e:
            raise FormatError("malformed benchmark CSV row: " + str(e))
    return out
