"""Experiment driver: configs, problem construction, runs, CSV and SVG output."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .aggregation import AggregatorSpec
from .attacks import AttackStrategy
from .optimizers import FGM_VARIANTS, fgm, gd, pigs
from .oracle import InexactOracle
from .problems import (
    ClientPool,
    binarize_labels,
    dirichlet_partition,
    fit_heterogeneity,
    hessian_similarity,
    load_csv,
    make_logistic,
    make_quadratic,
    mean_loss,
    random_points,
    reference_minimizer,
    synthetic_clients,
)
from .trace import COLUMNS, RunTrace, TraceRow

log = logging.getLogger(__name__)

OPTIMIZERS = ("gd", "fgm", "pigs", "audit")
PROBLEMS = ("quadratic", "logistic")


@dataclass
class ExperimentConfig:
    """Everything one run needs. ``runs`` maps a run name to key overrides,
    letting one file describe a side-by-side comparison on a shared problem."""

    name: str = "run"
    # problem
    problem: str = "logistic"
    dataset: str | None = None
    positive_class: float | None = None
    beta: float | None = None
    iid: bool = False
    dim: int = 10
    samples_per_client: int = 500
    heterogeneity: float = 0.0
    hessian_spread: float = 0.0
    separation: float = 1.0
    cond: float = 1.0
    lam: float = 1e-3
    # clients
    n: int = 21
    f: int = 1
    aggregator: str = "nnm+cwtm"
    attack: str = "alie:ls"
    # optimizer
    optimizer: str = "gd"
    K: int = 100
    eta: float | None = None
    eta_delta_mult: float = 0.5
    L: float | None = None
    mu: float | None = None
    c: float | None = None
    E: float = 1e-6
    max_inner: int = 500
    fgm_variant: str = "derived"
    proxy: str = "client0"
    x0: str = "zeros"
    x0_radius: float = 1.0
    seed: int = 0
    timing: bool = False
    output: str | None = None
    runs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}; choose from {PROBLEMS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.fgm_variant not in FGM_VARIANTS:
            raise ValueError(f"unknown fgm_variant {self.fgm_variant!r}")
        if not 0 <= self.f < self.n:
            raise ValueError(f"need 0 <= f < n, got f={self.f}, n={self.n}")
        if self.x0 not in ("zeros", "random"):
            raise ValueError("x0 must be 'zeros' or 'random'")
        if self.proxy not in ("client0", "global"):
            raise ValueError("proxy must be 'client0' or 'global'")
        # resolve catalog strings early
        AggregatorSpec.parse(self.aggregator, self.f)
        AttackStrategy.parse(self.attack)
        for name, over in self.runs.items():
            bad = set(over) - {f.name for f in fields(self)} | ({"runs", "name"} & set(over))
            if bad:
                raise ValueError(f"run {name!r} overrides unknown keys {sorted(bad)}")

    # -- serialization ----------------------------------------------------- #

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def with_overrides(self, overrides):
        data = self.to_dict()
        data.update(overrides)
        return type(self).from_dict(data)

    def expand(self):
        """One config per entry of ``runs`` (or just ``self``)."""
        if not self.runs:
            return {self.name: self}
        out = {}
        for name, over in self.runs.items():
            out[name] = self.with_overrides({**over, "runs": {}, "name": name})
        return out


def parse_override(text):
    """``key=value`` with the value parsed as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# --------------------------------------------------------------------------- #
# problem construction

_PROBLEM_KEYS = ("problem", "dataset", "positive_class", "beta", "iid", "dim",
                 "samples_per_client", "heterogeneity", "hessian_spread",
                 "separation", "cond", "lam", "n", "f", "seed")


@dataclass
class Problem:
    honest: list
    global_loss: object
    x_star: np.ndarray


def _quadratic_clients(cfg, rng):
    d, m = cfg.dim, cfg.n - cfg.f
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eigs = np.geomspace(1.0, cfg.cond, d)
    A = Q @ np.diag(eigs) @ Q.T
    center = rng.standard_normal(d)
    offsets = rng.standard_normal((m, d))
    offsets -= offsets.mean(axis=0)
    honest = []
    for i in range(m):
        Ai = A
        if cfg.hessian_spread:
            P = rng.standard_normal((d, d))
            P = 0.5 * (P + P.T)
            P *= cfg.hessian_spread / np.abs(np.linalg.eigvalsh(P)).max()
            Ai = A + P
        honest.append(make_quadratic(Ai, Ai @ center + cfg.heterogeneity * offsets[i]))
    return honest


def _logistic_clients(cfg, rng):
    m = cfg.n - cfg.f
    if cfg.dataset is None:
        data = synthetic_clients(m, cfg.samples_per_client, cfg.dim, cfg.heterogeneity,
                                 cfg.separation, cfg.cond, seed=int(rng.integers(2**32)))
    else:
        X, labels = load_csv(cfg.dataset)
        y = binarize_labels(labels, cfg.positive_class)
        if cfg.iid or cfg.beta is None:
            perm = rng.permutation(X.shape[0])
            parts = np.array_split(perm, m)
        else:
            parts = dirichlet_partition(labels, m, cfg.beta, seed=int(rng.integers(2**32)))
        data = [(X[p], y[p]) for p in parts]
    return [make_logistic(X, y, cfg.lam) for X, y in data]


def build_problem(cfg):
    """Honest oracles, their mean and a certified reference minimizer."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.problem == "quadratic":
        honest = _quadratic_clients(cfg, rng)
    else:
        honest = _logistic_clients(cfg, rng)
    loss = mean_loss(honest)
    x_star, _ = reference_minimizer(loss)
    loss.minimizer = x_star
    return Problem(honest, loss, x_star)


def build_oracle(cfg, problem):
    attack = AttackStrategy.parse(cfg.attack)
    pool = ClientPool(problem.honest, [attack] * cfg.f)
    agg = AggregatorSpec.parse(cfg.aggregator, cfg.f)
    return InexactOracle(pool, agg, rng_seed=cfg.seed, audit=True)


def _x0(cfg, problem):
    if cfg.x0 == "zeros":
        return np.zeros(problem.global_loss.dim)
    rng = np.random.default_rng(cfg.seed + 1)
    return problem.x_star + cfg.x0_radius * rng.standard_normal(problem.global_loss.dim)


def _similarity(cfg, problem, proxy):
    rng = np.random.default_rng(cfg.seed + 2)
    pts = [problem.x_star] + random_points(rng, problem.global_loss.dim, 4, problem.x_star, 1.0)
    return hessian_similarity(problem.global_loss, proxy, pts)


def _audit_trace(oracle, problem, cfg):
    """Query the oracle at K random points around x* (no optimization)."""
    rng = np.random.default_rng(cfg.seed + 3)
    loss = problem.global_loss
    f_star = loss.value(problem.x_star)
    trace = RunTrace(name="audit")
    for k, x in enumerate(random_points(rng, loss.dim, cfg.K, problem.x_star, cfg.x0_radius)):
        g, rec = oracle.sample(x)
        trace.rows.append(TraceRow(k, loss.value(x) - f_star, math.sqrt(rec.grad_norm_sq),
                                   float(np.linalg.norm(x - problem.x_star)), rec.err_sq, math.nan))
    return trace


def certify_trace(trace, oracle):
    """Fill ``lemma1_bound`` with (G, B) fitted on the run's own query points."""
    recs = oracle.records[-len(trace.rows):] if trace.rows else []
    if len(recs) < 2:
        return trace
    var = np.array([r.honest_var for r in recs])
    s = np.array([r.grad_norm_sq for r in recs])
    G2, B2, _ = fit_heterogeneity(var, s)
    nu = oracle.nu
    rows = []
    violations = 0
    for row, r in zip(trace.rows, recs):
        bound = 0.0 if nu == 0 else nu * G2 + nu * B2 * r.grad_norm_sq
        violations += row.oracle_err_sq > bound
        rows.append(dataclasses.replace(row, lemma1_bound=bound))
    trace.rows = rows
    trace.info.update(G2=G2, B2=B2, nu=nu, lemma1_violations=int(violations))
    return trace


def run_experiment(config, problem=None):
    """Build pool, oracle and optimizer for one config and return its trace."""
    cfg = config
    if cfg.runs:
        raise ValueError("config has named runs; use run_config")
    if problem is None:
        problem = build_problem(cfg)
    oracle = build_oracle(cfg, problem)
    loss = problem.global_loss
    x0 = _x0(cfg, problem)
    info = {}
    try:
        if cfg.optimizer == "gd":
            eta = cfg.eta if cfg.eta is not None else 1.0 / loss.L
            trace = gd(oracle, loss, x0, eta, cfg.K, timing=cfg.timing)
            info["eta"] = eta
        elif cfg.optimizer == "fgm":
            L = cfg.L if cfg.L is not None else loss.L
            mu = cfg.mu if cfg.mu is not None else loss.mu
            trace = fgm(oracle, loss, x0, L, mu, cfg.K, variant=cfg.fgm_variant, timing=cfg.timing)
            info.update(L=L, mu=mu)
        elif cfg.optimizer == "pigs":
            proxy = problem.honest[0] if cfg.proxy == "client0" else loss
            delta = _similarity(cfg, problem, proxy)
            eta = cfg.eta if cfg.eta is not None else cfg.eta_delta_mult / max(delta, 1e-12)
            c = cfg.c if cfg.c is not None else 1e-3 / eta
            trace = pigs(oracle, loss, proxy, x0, eta, c=c, E=cfg.E, K=cfg.K,
                         max_inner=cfg.max_inner, timing=cfg.timing)
            mu = loss.mu or 0.0
            info.update(Delta=delta, step_condition_ok=bool(mu > 0 and eta <= 1.0 / (delta + 8 * c / mu)))
        else:
            trace = _audit_trace(oracle, problem, cfg)
    except Exception as exc:
        raise RuntimeError(f"{cfg.name}: {cfg.optimizer} failed: {exc}") from exc
    trace.name = cfg.name
    trace.info.update(info, rounds=oracle.round_counter, optimizer=cfg.optimizer)
    certify_trace(trace, oracle)
    return trace


def run_config(config):
    """Run every entry of ``config.runs`` (sharing problems where possible)."""
    traces = {}
    cache = {}
    for name, cfg in config.expand().items():
        key = tuple(repr(getattr(cfg, k)) for k in _PROBLEM_KEYS)
        if key not in cache:
            cache[key] = build_problem(cfg)
        traces[name] = run_experiment(cfg, cache[key])
    return traces


# --------------------------------------------------------------------------- #
# comparison and output


def rounds_to_target(trace, target):
    gaps = trace.loss_gap
    hit = np.flatnonzero(gaps <= target)
    return int(hit[0]) if hit.size else math.inf


def compare_runs(traces, target=None):
    """Rounds until each trace first reaches ``target`` (default 1.5x the smallest plateau).

    Returns ``(target, rows)`` where rows are ``(name, rounds, plateau)``.
    """
    traces = list(traces.values()) if isinstance(traces, dict) else list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    if target is None:
        target = 1.5 * min(t.plateau() for t in traces)
    return target, [(t.name, rounds_to_target(t, target), t.plateau()) for t in traces]


def format_comparison(target, rows):
    lines = [f"target loss gap {target:.6g}", f"{'run':<16}{'rounds':>10}{'plateau':>16}"]
    for name, r, p in rows:
        lines.append(f"{name:<16}{r!s:>10}{p:>16.6g}")
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trace_to_csv(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in trace.rows:
        w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def emit_csv(trace, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(trace_to_csv(trace))
    except OSError as exc:
        raise OSError(f"cannot write trace CSV to {path}: {exc}") from exc
    return path


def read_csv(path):
    """Load a trace CSV back into a :class:`RunTrace`."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = [TraceRow(int(r["round"]), float(r["loss_gap"]), float(r["grad_norm"]),
                         float(r["dist_to_opt"]), float(r["oracle_err_sq"]),
                         float(r["lemma1_bound"]), int(r["inner_iters"]), float(r["wall_ms"]))
                for r in reader]
    return RunTrace(name=Path(path).stem, rows=rows)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def traces_to_svg(traces, width=640, height=400, title="loss gap"):
    """Log-scale loss gap vs round, one polyline per trace."""
    traces = list(traces.values()) if isinstance(traces, dict) else list(traces)
    pad_l, pad_r, pad_t, pad_b = 70, 130, 30, 45
    floor = 1e-300
    vals = [np.maximum(t.loss_gap, floor) for t in traces if len(t)]
    xmax = max([len(t) - 1 for t in traces if len(t)] + [1])
    if vals:
        pos = np.concatenate(vals)
        lo = math.floor(math.log10(max(pos.min(), 1e-300)))
        hi = math.ceil(math.log10(max(pos.max(), 1e-300)))
    else:
        lo, hi = -1, 0
    if hi <= lo:
        hi = lo + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(k):
        return pad_l + pw * k / xmax

    def sy(v):
        return pad_t + ph * (hi - math.log10(max(v, floor))) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    step = max(1, (hi - lo) // 8)
    for e in range(lo, hi + 1, step):
        y = sy(10.0 ** e)
        out.append(f'<line x1="{pad_l}" y1="{y:.2f}" x2="{pad_l + pw}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{pad_l - 6}" y="{y + 4:.2f}" text-anchor="end" font-size="11">1e{e}</text>')
    for k in np.linspace(0, xmax, 6):
        out.append(f'<text x="{sx(k):.2f}" y="{pad_t + ph + 16}" text-anchor="middle" '
                   f'font-size="11">{int(round(k))}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">round</text>')
    for i, t in enumerate(traces):
        color = _PALETTE[i % len(_PALETTE)]
        if len(t):
            pts = " ".join(f"{sx(k):.2f},{sy(v):.2f}" for k, v in enumerate(t.loss_gap))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = pad_t + 16 * (i + 1)
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly - 4}" x2="{pad_l + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 35}" y="{ly}" font-size="11">{escape(t.name or f"run {i}")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(traces, path, **kwargs):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(traces_to_svg(traces, **kwargs))
    except OSError as exc:
        raise OSError(f"cannot write plot to {path}: {exc}") from exc
    return path


def write_outputs(traces, outdir):
    """``<outdir>/<run>.csv`` per trace, plus ``loss_gap.svg`` for comparisons."""
    outdir = Path(outdir)
    paths = [emit_csv(t, outdir / f"{name}.csv") for name, t in traces.items()]
    paths.append(emit_plot(traces, outdir / "loss_gap.svg"))
    return paths


def run_config_file(path, overrides=(), outdir=None):
    cfg = ExperimentConfig.load(path)
    if overrides:
        cfg = cfg.with_overrides(dict(parse_override(o) for o in overrides))
    traces = run_config(cfg)
    out = outdir or cfg.output
    if out:
        write_outputs(traces, out)
    return cfg, traces


def _sweep_one(args):
    path, outdir = args
    cfg, traces = run_config_file(path, outdir=os.path.join(outdir, Path(path).stem) if outdir else None)
    return str(path), compare_runs(traces)


def sweep(directory, jobs=1, outdir=None):
    """Run every ``*.json`` config in ``directory``; returns ``{path: comparison}``."""
    paths = sorted(Path(directory).glob("*.json"))
    tasks = [(str(p), outdir) for p in paths]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return dict(ex.map(_sweep_one, tasks))
    return dict(map(_sweep_one, tasks))
