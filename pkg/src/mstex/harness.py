"""Corpus-level experiments: run methods over exemplars, persist records, derive tables.

Per-image results go to an append-only ``records.jsonl``; every table and
figure is a view computed from those records. Re-running a plan skips the
(exemplar, method, seed) keys already on disk.
"""

from __future__ import annotations

import csv
import glob
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .features import ExtractorConfig, FeatureExtractor
from .imageio import (
    BandSelection,
    MultispectralImage,
    PaletteImage,
    default_pooling,
    export_multispectral,
    export_png,
    load_multispectral,
    load_palette,
    pooled_visualization,
    select_bands,
)
from .metrics import (
    BAND_KEYS,
    RGB_BANDS,
    SCALAR_KEYS,
    DirectionSet,
    evaluate_pair,
    gradient_distance,
    hist_distance,
    spectrum_distance,
)
from .spectral import Projector, fit_pca, load_projector, save_projector
from .styledist import StyleModel, style_distance
from .synthesis import SynthesisConfig, synthesize

log = logging.getLogger(__name__)

BASE_METHODS = ("stochastic", "pca", "rgb_baseline")
RGB_TABLE_METRICS = ("L_style^RGB", "L_sp^mean", "L_grad", "L_hist")
BATCH_TABLE_METRICS = ("L_style^MS", "L_style^PCA", "L_sp^mean", "L_grad", "L_hist")


class PlanError(ValueError):
    """Invalid or unresolvable experiment plan."""


@dataclass
class ExperimentPlan:
    corpus: list[dict]  # {"path": ..., "id": optional}
    methods: list[str]
    output_dir: str
    palettes: dict[str, str] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    band_selection: list[int] | None = None
    synthesis: dict = field(default_factory=dict)
    extractor: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    projector: str | None = None
    workers: int = 1

    KNOWN_KEYS = ("corpus", "corpus_glob", "methods", "output_dir", "palettes", "seeds",
                  "band_selection", "synthesis", "extractor", "metrics", "projector", "workers")

    def __post_init__(self):
        if not self.corpus:
            raise PlanError("plan corpus is empty")
        if not self.methods:
            raise PlanError("plan lists no methods")
        for m in self.methods:
            name, _, palette = m.partition(":")
            if name == "pca_color":
                if palette not in self.palettes:
                    raise PlanError(f"method {m!r} needs palette {palette!r} in 'palettes'")
            elif name not in BASE_METHODS or palette:
                raise PlanError(f"unknown method {m!r}")
        SynthesisConfig(**self.synthesis)
        ExtractorConfig.from_dict(self.extractor)
        unknown = set(self.metrics) - {"directions", "direction_seed", "rgb_bands"}
        if unknown:
            raise PlanError(f"unknown metrics keys {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentPlan":
        d = dict(d)
        unknown = set(d) - set(cls.KNOWN_KEYS)
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        base = base_dir or Path.cwd()
        corpus = [c if isinstance(c, dict) else {"path": c} for c in d.pop("corpus", [])]
        pattern = d.pop("corpus_glob", None)
        if pattern:
            pat = pattern if Path(pattern).is_absolute() else str(base / pattern)
            corpus += [{"path": p} for p in sorted(glob.glob(pat))]
        for c in corpus:
            if not Path(c["path"]).is_absolute():
                c["path"] = str(base / c["path"])
        palettes = {k: v if Path(v).is_absolute() else str(base / v) for k, v in d.pop("palettes", {}).items()}
        if "output_dir" not in d:
            raise PlanError("plan needs an 'output_dir'")
        out = d.pop("output_dir")
        out = out if Path(out).is_absolute() else str(base / out)
        try:
            return cls(corpus=corpus, palettes=palettes, output_dir=out, **d)
        except TypeError as exc:
            raise PlanError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KNOWN_KEYS if k != "corpus_glob"}


@dataclass
class AggregateTable:
    methods: list[str]
    metrics: list[str]
    mean: dict[tuple[str, str], float]
    std: dict[tuple[str, str], float]
    count: dict[tuple[str, str], int]
    provenance: dict[tuple[str, str], list[tuple[str, str, int]]]

    def cell(self, method: str, metric: str) -> float:
        return self.mean[(method, metric)]

    def best(self, metric: str) -> str:
        vals = {m: self.mean[(m, metric)] for m in self.methods if (m, metric) in self.mean}
        return min(vals, key=vals.get)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method"] + [c for m in self.metrics for c in (m, f"{m} std", f"{m} n")])
            for meth in self.methods:
                row = [meth]
                for met in self.metrics:
                    key = (meth, met)
                    row += [repr(self.mean[key]), repr(self.std[key]), self.count[key]] if key in self.mean else ["", "", 0]
                w.writerow(row)
        return path

    def to_text(self) -> str:
        width = max(len(m) for m in self.methods + ["Method"]) + 2
        head = "Method".ljust(width) + "".join(m.rjust(14) for m in self.metrics)
        lines = [head, "-" * len(head)]
        for meth in self.methods:
            cells = []
            for met in self.metrics:
                key = (meth, met)
                cells.append(f"{self.mean[key]:14.5g}" if key in self.mean else " " * 13 + "-")
            lines.append(meth.ljust(width) + "".join(cells))
        return "\n".join(lines) + "\n"


def aggregate(records: Iterable[dict], metrics: Sequence[str] = SCALAR_KEYS,
              methods: Sequence[str] | None = None) -> AggregateTable:
    """Mean (and population std) over exemplars for each (method, metric)."""
    values: dict[tuple[str, str], list[float]] = {}
    prov: dict[tuple[str, str], list[tuple[str, str, int]]] = {}
    seen: list[str] = []
    for r in records:
        if r["method"] not in seen:
            seen.append(r["method"])
        for met in metrics:
            v = r["metrics"].get(met)
            if v is None:
                continue
            values.setdefault((r["method"], met), []).append(float(v))
            prov.setdefault((r["method"], met), []).append((r["exemplar_id"], r["method"], r["seed"]))
    order = list(methods) if methods is not None else seen
    return AggregateTable(
        methods=[m for m in order if m in seen],
        metrics=list(metrics),
        mean={k: float(np.mean(v)) for k, v in values.items()},
        std={k: float(np.std(v)) for k, v in values.items()},
        count={k: len(v) for k, v in values.items()},
        provenance=prov,
    )


class RecordStore:
    """Append-only JSON-lines file; one writer at a time."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    @staticmethod
    def key(r: dict) -> tuple[str, str, int]:
        return (r["exemplar_id"], r["method"], int(r["seed"]))

    def load(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as f:
            return [json.loads(line) for line in f if line.strip()]

    def done(self) -> set[tuple[str, str, int]]:
        return {self.key(r) for r in self.load()}

    def append(self, record: dict) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class RunResult:
    table: AggregateTable
    records: list[dict]
    failures: list[tuple[tuple[str, str, int], str]]

    @property
    def ok(self) -> bool:
        return not self.failures


class _Context:
    """Resolved inputs shared by all work items of a plan."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.out = Path(plan.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.extractor = FeatureExtractor(ExtractorConfig.from_dict(plan.extractor))
        self.model = StyleModel(self.extractor)
        self.exemplars = self._load_corpus()
        self.palettes: dict[str, PaletteImage] = {k: load_palette(v) for k, v in plan.palettes.items()}
        self.projector = self._projector()
        n = next(iter(self.exemplars.values())).num_bands
        m = plan.metrics
        self.rgb_bands = tuple(m.get("rgb_bands", RGB_BANDS))
        self.dirs = DirectionSet.sample(n, m.get("directions", 1000), m.get("direction_seed", 0))
        self.rgb_dirs = DirectionSet.sample(3, m.get("directions", 1000), m.get("direction_seed", 0))
        self.base_cfg = plan.synthesis

    def _load_corpus(self) -> dict[str, MultispectralImage]:
        out = {}
        for item in self.plan.corpus:
            img = load_multispectral(item["path"])
            if self.plan.band_selection is not None:
                img = select_bands(img, BandSelection(tuple(self.plan.band_selection)))
            key = item.get("id") or img.source_id
            if key in out:
                raise PlanError(f"duplicate exemplar id {key!r}")
            out[key] = img
        counts = {img.num_bands for img in out.values()}
        if len(counts) != 1:
            raise PlanError(f"corpus mixes band counts {sorted(counts)}")
        return out

    def _projector(self) -> Projector:
        if self.plan.projector:
            return load_projector(self.plan.projector)
        path = self.out / "projector.json"
        if path.exists():
            return load_projector(path)
        p = fit_pca(list(self.exemplars.values()), fitted_on=self.plan.output_dir)
        save_projector(p, path)
        return p


def _method_config(ctx: _Context, method: str, seed: int, overrides: dict | None = None) -> SynthesisConfig:
    objective = {"stochastic": "stochastic", "pca": "projected", "pca_color": "projected_color",
                 "rgb_baseline": "rgb_plain"}[method.partition(":")[0]]
    return SynthesisConfig(**{**ctx.base_cfg, **(overrides or {}), "objective": objective, "rng_seed": seed})


def _stem(exemplar_id: str, method: str, seed: int) -> str:
    return f"{exemplar_id}__{method.replace(':', '-')}__s{seed}"


def _run_item(ctx: _Context, exemplar_id: str, method: str, seed: int, overrides: dict | None = None,
              label: str | None = None) -> dict:
    label = label or method
    exemplar = ctx.exemplars[exemplar_id]
    cfg = _method_config(ctx, method, seed, overrides)
    palette = ctx.palettes.get(method.partition(":")[2]) if method.startswith("pca_color") else None
    if method == "rgb_baseline":
        exemplar = select_bands(exemplar, BandSelection(ctx.rgb_bands))
    out_img, trace = synthesize(exemplar, cfg, ctx.model, projector=ctx.projector, palette=palette)
    stem = _stem(exemplar_id, label, seed)
    img_path = export_multispectral(out_img, ctx.out / "images" / f"{stem}.f64")
    trace.to_csv(ctx.out / "traces" / f"{stem}.csv")
    export_png(pooled_visualization(load_multispectral(img_path), default_pooling(out_img)),
               ctx.out / "images" / f"{stem}.png")
    saved = load_multispectral(img_path)
    if method == "rgb_baseline":
        report = _rgb_metrics(ctx, exemplar.data, saved.data)
    else:
        report = evaluate_pair(exemplar, saved, ctx.model, ctx.projector, ctx.dirs,
                               rgb_bands=ctx.rgb_bands).to_dict()
    return {
        "exemplar_id": exemplar_id,
        "method": label,
        "seed": seed,
        "image": str(img_path.relative_to(ctx.out)),
        "config": cfg.to_dict(),
        "iterations": trace.iterations,
        "final_loss": trace.final_loss,
        "metrics": report,
    }


def _rgb_metrics(ctx: _Context, a3: np.ndarray, b3: np.ndarray) -> dict:
    with torch.no_grad():
        style = float(style_distance(a3, b3, ctx.model))
    return {
        "L_style^RGB": style,
        "L_sp^mean": spectrum_distance(a3, b3),
        "L_grad": gradient_distance(a3, b3, ctx.rgb_dirs),
        "L_hist": hist_distance(a3, b3, ctx.rgb_dirs),
    }


def _execute(ctx: _Context, store: RecordStore, items: list[tuple], overrides_for=None) -> list:
    """Run work items on a bounded pool; records are appended in item order."""
    done = store.done()
    todo = [it for it in items if (it[0], it[2], it[3]) not in done]
    log.info("%d work items, %d already recorded", len(items), len(items) - len(todo))
    failures = []

    def work(item):
        exemplar_id, method, label, seed, overrides = item
        return _run_item(ctx, exemplar_id, method, seed, overrides, label)

    with ThreadPoolExecutor(max_workers=max(1, ctx.plan.workers)) as pool:
        futures = [(it, pool.submit(work, it)) for it in todo]
        for it, fut in futures:
            try:
                store.append(fut.result())
            except Exception as exc:  # per-item failures are reported, not fatal
                log.error("work item %s/%s/seed %s failed: %s", it[0], it[2], it[3], exc)
                failures.append(((it[0], it[2], it[3]), str(exc)))
    return failures


def _write_table(table: AggregateTable, out: Path, name: str) -> None:
    table.to_csv(out / f"{name}.csv")
    (out / f"{name}.txt").write_text(table.to_text())


def run_experiment(plan: ExperimentPlan) -> RunResult:
    """Synthesise and evaluate every (exemplar, method, seed) of the plan."""
    ctx = _Context(plan)
    (ctx.out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True))
    store = RecordStore(ctx.out / "records.jsonl")
    items = [(eid, m, m, s, None) for eid in ctx.exemplars for m in plan.methods for s in plan.seeds]
    failures = _execute(ctx, store, items)
    wanted = {(i[0], i[2], i[3]) for i in items}
    records = [r for r in store.load() if store.key(r) in wanted]
    multi = [m for m in plan.methods if m != "rgb_baseline"]
    table = aggregate([r for r in records if r["method"] in multi], SCALAR_KEYS, multi)
    _write_table(table, ctx.out, "table")
    if any(r["method"] in multi for r in records):
        bandwise_report([r for r in records if r["method"] in multi], ctx.out)
    return RunResult(table, records, failures)


def rgb_comparison(plan: ExperimentPlan) -> RunResult:
    """RGB-band comparison: adds the 3-band baseline and evaluates every method on bands 2-4."""
    methods = [m for m in plan.methods if m != "rgb_baseline"]
    multi = run_experiment(ExperimentPlan(**{**plan.__dict__, "methods": methods})) if methods else None
    ctx = _Context(plan)
    store = RecordStore(ctx.out / "records.jsonl")
    base_items = [(eid, "rgb_baseline", "rgb_baseline", s, None) for eid in ctx.exemplars for s in plan.seeds]
    failures = _execute(ctx, store, base_items) + (multi.failures if multi else [])
    by_key = {store.key(r): r for r in store.load()}
    rows = []
    idx = list(ctx.rgb_bands)
    for eid, ex in ctx.exemplars.items():
        for s in plan.seeds:
            base = by_key.get((eid, "rgb_baseline", s))
            if base:
                rows.append(base)
            for m in methods:
                rec = by_key.get((eid, m, s))
                if rec is None:
                    continue
                synth = load_multispectral(ctx.out / rec["image"])
                rows.append({**rec, "metrics": _rgb_metrics(ctx, ex.data[:, :, idx], synth.data[:, :, idx])})
    table = aggregate(rows, RGB_TABLE_METRICS, ["rgb_baseline"] + methods)
    _write_table(table, ctx.out, "table_rgb")
    return RunResult(table, rows, failures)


def batch_size_study(plan: ExperimentPlan, batch_sizes: Sequence[int]) -> RunResult:
    """Stochastic method at several triplet batch sizes; labels are ``stochastic_B{b}``."""
    ctx = _Context(plan)
    out = ctx.out / "batch_study"
    out.mkdir(exist_ok=True)
    ctx.out = out
    store = RecordStore(out / "records.jsonl")
    labels = [f"stochastic_B{b}" for b in batch_sizes]
    items = [(eid, "stochastic", lab, s, {"batch_size": b})
             for b, lab in zip(batch_sizes, labels) for eid in ctx.exemplars for s in plan.seeds]
    failures = _execute(ctx, store, items)
    wanted = {(i[0], i[2], i[3]) for i in items}
    records = [r for r in store.load() if store.key(r) in wanted]
    table = aggregate(records, BATCH_TABLE_METRICS, labels)
    _write_table(table, out, "table_batch")
    bandwise_report(records, out)
    return RunResult(table, records, failures)


def bandwise_report(records: Sequence[dict], out_dir, render: bool = True) -> Path:
    """Per-band means of L_hist, L_grad and L_sp for each method.

    Writes ``bandwise.csv`` with one column per (method, metric, band) and one
    row of means, plus ``bandwise.png`` when ``render`` is set.
    """
    out_dir = Path(out_dir)
    methods: list[str] = []
    bands: list[str] = []
    acc: dict[tuple[str, str, str], list[float]] = {}
    for r in records:
        if r["method"] not in methods:
            methods.append(r["method"])
        for key in BAND_KEYS:
            for band, v in r["metrics"].get(key, {}).items():
                if band not in bands:
                    bands.append(band)
                acc.setdefault((r["method"], key, band), []).append(float(v))
    cols = [(m, k, b) for m in methods for k in BAND_KEYS for b in bands]
    path = out_dir / "bandwise.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"{m}|{k}|{b}" for m, k, b in cols])
        w.writerow([repr(float(np.mean(acc[c]))) if c in acc else "" for c in cols])
    if render and cols:
        _plot_bandwise(acc, methods, bands, out_dir / "bandwise.png")
    return path


def _plot_bandwise(acc, methods, bands, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(BAND_KEYS), figsize=(4 * len(BAND_KEYS), 3.2))
    x = np.arange(len(bands))
    for ax, key in zip(axes, BAND_KEYS):
        for m in methods:
            y = [np.mean(acc[(m, key, b)]) if (m, key, b) in acc else np.nan for b in bands]
            ax.plot(x, y, marker="o", label=m)
        ax.set_xticks(x, bands, rotation=45, fontsize=7)
        ax.set_title(key)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def load_records(path) -> list[dict]:
    return RecordStore(Path(path)).load()
