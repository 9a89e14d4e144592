"""Experiment orchestration: source training, sample sweeps, dynamic schedules, reports.

All randomness is derived from the config seed through :func:`derive_seed`, so
every row can be regenerated from ``(config, seed)`` alone.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import adapt as A
from . import data as D
from . import fisher as F
from . import models as M
from .corruptions import KINDS, CorruptionSpec, corrupt
from .errors import ConfigError, FormatError
from .training import dataset_loss, train

log = logging.getLogger(__name__)

METHODS = ("source", "sgd_high", "sgd_low", "dira")
M0_NAME = "m0.dira"
F0_NAME = "f0.dirf"
ROW_FIELDS = ("method", "corruption_kind", "severity", "n_samples", "seed",
              "top1_source_test", "top1_target_test", "wall_ms")
DYNAMIC_FIELDS = ("step", "position") + ROW_FIELDS


@dataclass
class ExperimentConfig:
    dataset: str = "digits"
    image_size: int | None = None
    architecture: str = "cnn-small"
    hidden: list[int] = field(default_factory=lambda: [8, 16])
    corruptions: list[str] = field(default_factory=lambda: ["gaussian_noise"])
    severity: int = 5
    sample_counts: list[int] = field(default_factory=lambda: [1, 2, 5, 10, 20, 50, 100])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    eta: float = 1e-5
    lam: float = 1.0
    epochs: int = 10
    batch_size: int | None = None
    sgd_high_eta: float = 1e-2
    sgd_low_eta: float | None = None  # None -> same as eta
    seed: int = 0
    n_seeds: int = 5
    source_eta: float = 0.05
    source_batch_size: int = 32
    source_momentum: float = 0.9
    source_lr_drops: int = 2
    source_max_epochs: int = 200
    fisher_samples: int = 1000
    train_fraction: float = 0.6
    target_train_fraction: float = 0.5
    output_dir: str = "runs/default"
    record_timing: bool = False

    def validate(self) -> None:
        counts = list(self.sample_counts)
        if not counts or any(c < 1 for c in counts) or any(b <= a for a, b in zip(counts, counts[1:])):
            raise ConfigError(f"sample_counts must be positive and strictly increasing, got {counts}")
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method {bad[0]!r}; choose from {METHODS}")
        for kind in self.corruptions:
            CorruptionSpec(kind, self.severity)
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be positive")
        if self.image_size is not None and self.image_size < 1:
            raise ConfigError("image_size must be positive")
        A.AdaptConfig(self.eta, self.lam, self.epochs, self.batch_size)
        for name in ("sgd_high_eta", "sgd_low_eta", "source_eta"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("train_fraction", "target_train_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")

    @property
    def low_eta(self) -> float:
        return self.eta if self.sgd_low_eta is None else self.sgd_low_eta

    def adapt_config(self, seed: int) -> A.AdaptConfig:
        return A.AdaptConfig(eta=self.eta, lam=self.lam, epochs=self.epochs, batch_size=self.batch_size, seed=seed)

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)


@dataclass(frozen=True)
class ResultRow:
    method: str
    corruption_kind: str
    severity: int
    n_samples: int
    seed: int
    top1_source_test: float
    top1_target_test: float
    wall_ms: float = 0.0

    def __post_init__(self):
        for v in (self.top1_source_test, self.top1_target_test):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"accuracy {v} outside [0, 1]")
        if self.wall_ms < 0:
            raise ConfigError("wall_ms must be nonnegative")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.extend(p.encode("utf-8"))
            ints.append(0x100)
        else:
            ints.append(int(p))
    return int(np.random.SeedSequence(ints).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


# -- data ---------------------------------------------------------------------------

def resolve_dataset(cfg: ExperimentConfig) -> D.LabeledSet:
    name = cfg.dataset
    if name == "digits":
        data = D.load_digits()
    elif name == "synthetic":
        data = D.make_synthetic(4, 150, 8, 10.0, cfg.seed)
    else:
        path = Path(name)
        if not path.is_dir():
            raise ConfigError(f"dataset {name!r} is neither a known name nor a directory")
        data = D.load_idx_dir(path)
    if cfg.image_size is not None:
        if data.images.ndim != 4:
            raise ConfigError("image_size only applies to image datasets")
        data = D.resize(data, cfg.image_size)
    return data


def source_split(cfg: ExperimentConfig) -> tuple[D.LabeledSet, D.LabeledSet]:
    return D.split(resolve_dataset(cfg), cfg.train_fraction, derive_seed(cfg.seed, "source-split"))


@dataclass
class TargetDomain:
    spec: CorruptionSpec
    train: D.LabeledSet
    test: D.LabeledSet
    order: np.ndarray  # permutation of train; S_T(n) = train[order[:n]]

    def draw(self, n: int) -> D.LabeledSet:
        if n > len(self.train):
            raise ConfigError(f"cannot draw {n} target samples from a pool of {len(self.train)}")
        return self.train.subset(self.order[:n])


def target_domain(cfg: ExperimentConfig, source_test: D.LabeledSet, kind: str, severity: int,
                  rep_seed: int) -> TargetDomain:
    spec = CorruptionSpec(kind, severity, derive_seed(rep_seed, kind, severity, "corrupt"))
    shifted = source_test.with_images(corrupt(source_test.images, spec), name=f"{kind}-{severity}")
    train_part, test_part = D.split(shifted, cfg.target_train_fraction,
                                    derive_seed(rep_seed, kind, severity, "target-split"))
    order = np.random.default_rng(derive_seed(rep_seed, kind, severity, "draw")).permutation(len(train_part))
    return TargetDomain(spec, train_part, test_part, order)


def rep_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + i for i in range(cfg.n_seeds)]


# -- artifacts ----------------------------------------------------------------------

def artifact_paths(cfg: ExperimentConfig) -> tuple[Path, Path]:
    out = Path(cfg.output_dir)
    return out / M0_NAME, out / F0_NAME


def require_artifacts(cfg: ExperimentConfig) -> tuple[M.Model, F.FisherDiag]:
    m0_path, f0_path = artifact_paths(cfg)
    for p in (m0_path, f0_path):
        if not p.is_file():
            raise ConfigError(f"missing artifact {p}; run train-source first")
    model = M.load(m0_path)
    return model, F.load_fisher(f0_path, checkpoint=m0_path)


def _echo_config(cfg: ExperimentConfig, command: str) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config.json").write_text(cfg.to_text())


# -- commands -----------------------------------------------------------------------

def cmd_train_source(cfg: ExperimentConfig) -> dict:
    """Train M0 on the clean source split, estimate F0, write both plus metrics."""
    cfg.validate()
    src_train, src_test = source_split(cfg)
    spec = M.ModelSpec(cfg.architecture, src_train.input_shape, src_train.num_classes,
                       tuple(cfg.hidden), derive_seed(cfg.seed, "init"))
    _echo_config(cfg, "train-source")
    model = M.build(spec)
    report = train(model, src_train, eta=cfg.source_eta, batch_size=cfg.source_batch_size,
                   max_epochs=cfg.source_max_epochs, momentum=cfg.source_momentum,
                   lr_drops=cfg.source_lr_drops, seed=derive_seed(cfg.seed, "source-train"))
    m0_path, f0_path = artifact_paths(cfg)
    m0_hash = M.save(model, m0_path)
    n_fisher = min(cfg.fisher_samples, len(src_train))
    fisher = F.estimate_fisher(model, src_train, n_fisher, derive_seed(cfg.seed, "fisher"))
    F.save_fisher(fisher, f0_path)
    metrics = {
        "dataset": src_train.name,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "epochs": report.epochs,
        "converged": report.converged,
        "final_train_loss": report.epoch_losses[-1],
        "source_train_loss": dataset_loss(model, src_train),
        "top1_source_train": A.evaluate(model, src_train),
        "top1_source_test": A.evaluate(model, src_test),
        "fisher_samples": n_fisher,
        "m0_digest": m0_hash,
    }
    (Path(cfg.output_dir) / "source_metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    return metrics


def _run_method(method: str, cfg: ExperimentConfig, model0: M.Model, fisher: F.FisherDiag,
                s_t: D.LabeledSet, seed: int) -> M.Model:
    if method == "dira":
        result = A.dira_adapt(model0, fisher, s_t, cfg.adapt_config(seed))
    else:
        eta = cfg.sgd_high_eta if method == "sgd_high" else cfg.low_eta
        result = A.naive_sgd_adapt(model0, s_t, eta=eta, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed)
    return A.apply(model0, result)


def _cell_rows(cfg: ExperimentConfig, model0: M.Model, fisher: F.FisherDiag, src_test: D.LabeledSet,
               kind: str, rep_seed: int, counts, methods) -> list[tuple[int, ResultRow]]:
    """Rows for one (corruption, seed) cell; each tagged with its sample-count index."""
    dom = target_domain(cfg, src_test, kind, cfg.severity, rep_seed)
    out = []
    base_src = base_tgt = None
    for ci, n in enumerate(counts):
        s_t = dom.draw(n) if any(m != "source" for m in methods) else None
        for method in methods:
            t0 = time.perf_counter()
            if method == "source":
                if base_src is None:
                    base_src, base_tgt = A.evaluate(model0, src_test), A.evaluate(model0, dom.test)
                acc_src, acc_tgt = base_src, base_tgt
            else:
                adapted = _run_method(method, cfg, model0, fisher, s_t, rep_seed)
                acc_src, acc_tgt = A.evaluate(adapted, src_test), A.evaluate(adapted, dom.test)
            wall = (time.perf_counter() - t0) * 1000 if cfg.record_timing else 0.0
            out.append((ci, ResultRow(method, kind, cfg.severity, n, rep_seed, acc_src, acc_tgt, wall)))
    return out


def _sweep_worker(args):
    cfg_dict, kind, rep_seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model0, fisher = require_artifacts(cfg)
    _, src_test = source_split(cfg)
    return _cell_rows(cfg, model0, fisher, src_test, kind, rep_seed, cfg.sample_counts, cfg.methods)


def _threads() -> int:
    raw = os.environ.get("DIRA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"DIRA_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _map_cells(jobs, worker):
    threads = min(_threads(), len(jobs))
    if threads <= 1:
        return [worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, jobs))


def cmd_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    """Every (corruption x n_samples x method x seed) cell, written to ``sweep.csv``."""
    cfg.validate()
    require_artifacts(cfg)
    _echo_config(cfg, "sweep")
    jobs = [(asdict(cfg), kind, s) for kind in cfg.corruptions for s in rep_seeds(cfg)]
    results = _map_cells(jobs, _sweep_worker)
    keyed = []
    for (_, kind, s), rows in zip(jobs, results):
        k = cfg.corruptions.index(kind)
        keyed.extend(((k, ci, METHODS.index(r.method), s), r) for ci, r in rows)
    keyed.sort(key=lambda kr: kr[0])
    rows = [r for _, r in keyed]
    write_rows(Path(cfg.output_dir) / "sweep.csv", rows)
    return rows


def _dynamic_worker(args):
    cfg_dict, kind, rep_seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model0, fisher = require_artifacts(cfg)
    _, src_test = source_split(cfg)
    dom = target_domain(cfg, src_test, kind, cfg.severity, rep_seed)
    arrival = ResultRow("source", kind, cfg.severity, 0, rep_seed,
                        A.evaluate(model0, src_test), A.evaluate(model0, dom.test))
    methods = [m for m in cfg.methods if m != "source"]
    rows = _cell_rows(cfg, model0, fisher, src_test, kind, rep_seed, cfg.sample_counts, methods)
    return [(-1, arrival)] + rows


def cmd_dynamic(cfg: ExperimentConfig, schedule: list[str] | None = None) -> list[dict]:
    """Visit domains in ``schedule`` order; each adapts from M0 at every sample checkpoint.

    Rows carry ``step`` (global checkpoint index) and ``position`` (domain
    index in the schedule); a ``source`` row with ``n_samples = 0`` marks each
    domain's arrival. Written to ``dynamic.csv``.
    """
    cfg.validate()
    schedule = list(schedule if schedule is not None else cfg.corruptions)
    if not schedule:
        raise ConfigError("dynamic schedule must be nonempty")
    for kind in schedule:
        CorruptionSpec(kind, cfg.severity)
    require_artifacts(cfg)
    _echo_config(cfg, "dynamic")
    jobs = [(asdict(cfg), kind, s) for kind in schedule for s in rep_seeds(cfg)]
    results = _map_cells(jobs, _dynamic_worker)
    per_domain = len(cfg.sample_counts) + 1
    out = []
    methods = ["source"] + [m for m in METHODS if m in cfg.methods and m != "source"]
    for pos, kind in enumerate(schedule):
        block = []
        for (_, k, s), rows in zip(jobs, results):
            if k != kind:
                continue
            block.extend(((ci, methods.index(r.method), s), r) for ci, r in rows)
        block.sort(key=lambda kr: kr[0])
        for (ci, _, _), r in block:
            d = {"step": pos * per_domain + ci + 2, "position": pos}
            d.update(asdict(r))
            out.append(d)
    write_dicts(Path(cfg.output_dir) / "dynamic.csv", DYNAMIC_FIELDS, out)
    return out


# -- CSV ------------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_dicts(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def write_rows(path, rows: list[ResultRow]) -> None:
    write_dicts(path, ROW_FIELDS, [asdict(r) for r in rows])


def read_rows(path) -> list[ResultRow]:
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError(f"{path}: empty CSV") from None
    for i, want in enumerate(ROW_FIELDS):
        got = header[i] if i < len(header) else None
        if got != want:
            raise FormatError(f"{path}: column {i} should be {want!r}, found {got!r}")
    if len(header) > len(ROW_FIELDS):
        raise FormatError(f"{path}: unexpected extra column {header[len(ROW_FIELDS)]!r}")
    rows = []
    for line, rec in enumerate(reader, start=2):
        if len(rec) != len(ROW_FIELDS):
            raise FormatError(f"{path}: line {line} has {len(rec)} fields, expected {len(ROW_FIELDS)}")
        try:
            rows.append(ResultRow(rec[0], rec[1], int(rec[2]), int(rec[3]), int(rec[4]),
                                  float(rec[5]), float(rec[6]), float(rec[7])))
        except ValueError as exc:
            raise FormatError(f"{path}: line {line}: {exc}") from exc
    return rows


# -- report ---------------------------------------------------------------------------

@dataclass
class Table:
    """Seed-mean top-1 target accuracy (percent) per method and corruption."""

    n_samples: int
    columns: list[str]
    rows: dict[str, list[float]]

    def mean(self, method: str) -> float:
        vals = self.rows[method]
        return sum(vals) / len(vals)

    def render(self) -> str:
        head = ["method"] + self.columns + ["mean"]
        lines = [f"Top-1 target accuracy (%), n_samples={self.n_samples}", "",
                 "| " + " | ".join(head) + " |",
                 "|" + "|".join(["---"] + ["---:"] * (len(head) - 1)) + "|"]
        for method, vals in self.rows.items():
            cells = [f"{v:.1f}" for v in vals] + [f"{self.mean(method):.1f}"]
            lines.append("| " + " | ".join([method] + cells) + " |")
        return "\n".join(lines) + "\n"


def _column(r: ResultRow, severities: set[int]) -> str:
    return r.corruption_kind if len(severities) == 1 else f"{r.corruption_kind}-s{r.severity}"


def build_table(rows: list[ResultRow], n_samples: int | None = None) -> Table:
    if not rows:
        raise FormatError("no result rows to report")
    if n_samples is None:
        n_samples = max(r.n_samples for r in rows)
    sev = {r.severity for r in rows}
    picked = [r for r in rows if r.n_samples == n_samples]
    if not picked:
        raise ConfigError(f"no rows with n_samples={n_samples}")
    columns = list(dict.fromkeys(_column(r, sev) for r in picked))
    methods = [m for m in METHODS if any(r.method == m for r in picked)]
    methods += [m for m in dict.fromkeys(r.method for r in picked) if m not in methods]
    table = {}
    for m in methods:
        vals = []
        for c in columns:
            accs = [r.top1_target_test for r in picked if r.method == m and _column(r, sev) == c]
            vals.append(100.0 * sum(accs) / len(accs) if accs else math.nan)
        table[m] = vals
    return Table(n_samples, columns, table)


def curves(rows: list[ResultRow], column: str) -> dict[str, list[tuple[int, float]]]:
    """Seed-mean target accuracy versus n_samples for each method in one corruption column."""
    sev = {r.severity for r in rows}
    out: dict[str, dict[int, list[float]]] = {}
    for r in rows:
        if _column(r, sev) == column:
            out.setdefault(r.method, {}).setdefault(r.n_samples, []).append(r.top1_target_test)
    return {m: [(n, 100.0 * sum(v) / len(v)) for n, v in sorted(d.items())] for m, d in out.items()}


_COLORS = {"source": "#555555", "sgd_high": "#d62728", "sgd_low": "#ff7f0e", "dira": "#1f77b4"}


def render_svg(title: str, series: dict[str, list[tuple[int, float]]]) -> str:
    """Accuracy-vs-samples line plot with a log-scaled x axis."""
    w, h, pad = 480, 320, 50
    xs = [n for pts in series.values() for n, _ in pts]
    lo, hi = math.log10(max(1, min(xs))), math.log10(max(xs))
    span = hi - lo or 1.0

    def px(n):
        return pad + (math.log10(max(n, 1)) - lo) / span * (w - 2 * pad)

    def py(acc):
        return h - pad - acc / 100.0 * (h - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
             f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>']
    for tick in range(0, 101, 25):
        parts.append(f'<text x="{pad - 6}" y="{py(tick) + 4:.1f}" text-anchor="end" font-size="10">{tick}</text>')
    for n in sorted(set(xs)):
        parts.append(f'<text x="{px(n):.1f}" y="{h - pad + 14}" text-anchor="middle" font-size="10">{n}</text>')
    parts.append(f'<text x="{w / 2:.1f}" y="{h - 10}" text-anchor="middle" font-size="11">target samples</text>')
    for i, (method, pts) in enumerate(series.items()):
        color = _COLORS.get(method, "#2ca02c")
        coords = " ".join(f"{px(n):.1f},{py(a):.1f}" for n, a in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{w - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{color}">{method}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(results_csv, n_samples: int | None = None, output_dir=None, plots: bool = True) -> Table:
    """Write ``report.md`` (methods x corruptions + mean) and one SVG per corruption."""
    rows = read_rows(results_csv)
    table = build_table(rows, n_samples)
    out = Path(output_dir) if output_dir is not None else Path(results_csv).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(table.render())
    if plots:
        for col in table.columns:
            (out / f"sweep_{col}.svg").write_text(render_svg(col, curves(rows, col)))
    return table
