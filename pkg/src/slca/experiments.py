"""Multi-seed experiment grids: data-fraction sweeps and ablations."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import TAP_NAMES, VARIANTS, HyperParams, ModelSpec
from .data import Dataset, stratified_fraction
from .encoder import Encoder, build_encoder
from .model import assemble_model
from .train import ExperimentRecord, MetricSink, Split, TapCache, train

log = logging.getLogger(__name__)

VARIANT_LABELS = {
    "baseline": "Backbone",
    "add_no_attention": "Backbone + add (no attention)",
    "sigmoid_only": "Backbone + sigmoid",
    "slca": "Backbone + SLCA",
    "slca_projector": "Backbone + SLCA + projector head",
}
TAP_LABELS = {
    "pe": "patch embedding (PE)",
    "t_first": "the first Transformer block",
    "t_mid": "the middle Transformer block",
    "t_last": "the last Transformer block",
    "neck": "the Conv block",
}


def default_train_count(dataset: Dataset) -> int:
    k = dataset.header.num_classes
    return int(round(0.8 * len(dataset) / k)) * k


@dataclass
class Job:
    spec: ModelSpec
    fraction: float
    seed: int

    @property
    def key(self) -> str:
        return json.dumps([self.spec.model_dump(mode="json"), self.fraction, self.seed], sort_keys=True)


@dataclass
class ExperimentRunner:
    """Runs (spec, fraction, seed) jobs on one dataset, memoising identical jobs.

    A run with seed ``s`` uses ``s`` as model seed, shuffling seed and
    subset seed, so variants compared at equal seeds see the same data.
    Frozen encoders and their tap caches are shared between runs.
    """

    dataset: Dataset
    hyper: HyperParams
    train_count: int | None = None
    sink: MetricSink | None = None
    records: dict[str, ExperimentRecord] = field(default_factory=dict)
    _encoders: dict = field(default_factory=dict)
    _taps: dict = field(default_factory=dict)

    def __post_init__(self):
        n_train = self.train_count or default_train_count(self.dataset)
        if not 0 < n_train < len(self.dataset):
            raise ValueError(f"train_count {n_train} leaves no held-out samples")
        self.train_indices = np.arange(n_train)
        self.heldout = Split(self.dataset, np.arange(n_train, len(self.dataset)))

    def encoder(self, spec: ModelSpec) -> Encoder:
        key = spec.encoder.model_dump_json()
        if key not in self._encoders:
            self._encoders[key] = build_encoder(spec.encoder)
        return self._encoders[key]

    def taps(self, encoder: Encoder) -> TapCache:
        if encoder.digest not in self._taps:
            self._taps[encoder.digest] = TapCache(encoder, self.dataset)
        return self._taps[encoder.digest]

    def train_split(self, fraction: float, seed: int) -> Split:
        labels = self.dataset.labels[self.train_indices]
        return Split(self.dataset, self.train_indices[stratified_fraction(labels, fraction, seed)])

    def run(self, job: Job) -> ExperimentRecord:
        if job.key in self.records:
            return self.records[job.key]
        spec = job.spec.with_(seed=job.seed)
        hp = self.hyper.model_copy(update={"seed": job.seed})
        model = assemble_model(spec, self.encoder(spec))
        run_id = f"{spec.variant}-{'-'.join(spec.tap_assignment)}-p{job.fraction:g}-s{job.seed}"
        record, _ = train(model, self.train_split(job.fraction, job.seed), self.heldout, hp,
                          taps=self.taps(model.encoder) if model.uses_encoder else None,
                          sink=self.sink, run_id=run_id, fraction=job.fraction, split_seed=job.seed)
        log.info("%s: test acc %.4f auc %.4f (%.0fs)", run_id, record.test_accuracy,
                 record.test_auc, record.wall_clock_seconds)
        self.records[job.key] = record
        return record

    def run_all(self, jobs: list[Job], workers: int = 1) -> list[ExperimentRecord]:
        todo = [j for j in dict.fromkeys(j.key for j in jobs) if j not in self.records]
        by_key = {j.key: j for j in jobs}
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(workers) as pool:
                futures = {k: pool.submit(_run_isolated, self.dataset, self.hyper, self.train_count, by_key[k])
                           for k in todo}
                for k, fut in futures.items():
                    self.records[k] = fut.result()
        else:
            for k in todo:
                self.run(by_key[k])
        return [self.records[j.key] for j in jobs]


def _run_isolated(dataset, hyper, train_count, job) -> ExperimentRecord:
    return ExperimentRunner(dataset, hyper, train_count).run(job)


def _stats(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def _cell(records: list[ExperimentRecord]) -> dict:
    accs = [r.test_accuracy for r in records]
    aucs = [r.test_auc for r in records]
    acc_mean, acc_std = _stats(accs)
    auc_mean, auc_std = _stats(aucs)
    return {"acc_mean": acc_mean, "acc_std": acc_std, "auc_mean": auc_mean, "auc_std": auc_std,
            "per_seed_acc": accs, "per_seed_auc": aucs, "seeds": [r.seed for r in records]}


def run_fraction_sweep(runner: ExperimentRunner, spec: ModelSpec, fractions=(0.1, 0.5, 1.0),
                       seeds=(0, 1, 2, 3, 4), workers: int = 1) -> dict:
    """Train ``spec`` and the baseline at every (fraction, seed); one row per (variant, fraction)."""
    variants = [spec.variant] + (["baseline"] if spec.variant != "baseline" else [])
    jobs = [Job(spec.with_(variant=v), p, s) for v in variants for p in fractions for s in seeds]
    runner.run_all(jobs, workers)
    rows = []
    for v in variants:
        for p in fractions:
            recs = [runner.run(Job(spec.with_(variant=v), p, s)) for s in seeds]
            rows.append({"variant": v, "fraction": p, **_cell(recs)})
    improvements = []
    if len(variants) == 2:
        for p in fractions:
            a = next(r for r in rows if r["variant"] == spec.variant and r["fraction"] == p)
            b = next(r for r in rows if r["variant"] == "baseline" and r["fraction"] == p)
            improvements.append({"fraction": p, "acc_improvement": a["acc_mean"] - b["acc_mean"],
                                 "auc_improvement": a["auc_mean"] - b["auc_mean"]})
    return {"mode": "fractions", "variant": spec.variant, "rows": rows, "improvements": improvements}


def run_ablation(runner: ExperimentRunner, spec: ModelSpec, seeds=(0, 1, 2, 3, 4),
                 variants=VARIANTS, workers: int = 1) -> dict:
    """One row per fusion variant on the full training set, equal seeds and data."""
    jobs = [Job(spec.with_(variant=v), 1.0, s) for v in variants for s in seeds]
    runner.run_all(jobs, workers)
    rows = [{"variant": v, **_cell([runner.run(Job(spec.with_(variant=v), 1.0, s)) for s in seeds])}
            for v in variants]
    return {"mode": "fusion", "rows": rows}


def run_block_ablation(runner: ExperimentRunner, spec: ModelSpec, seeds=(0, 1, 2, 3, 4),
                       taps=TAP_NAMES, workers: int = 1) -> dict:
    """SLCA variant with each tap repeated at all five fusion points, plus the mixed assignment."""
    base = spec.with_(variant="slca")
    assignments = [[t] * 5 for t in taps] + [list(TAP_NAMES)]
    jobs = [Job(base.with_(tap_assignment=a), 1.0, s) for a in assignments for s in seeds]
    runner.run_all(jobs, workers)
    rows = []
    for a in assignments:
        recs = [runner.run(Job(base.with_(tap_assignment=a), 1.0, s)) for s in seeds]
        rows.append({"tap_assignment": a, "mixed": len(set(a)) > 1, **_cell(recs)})
    return {"mode": "blocks", "rows": rows}


def _pct(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def render_markdown(table: dict) -> str:
    mode = table["mode"]
    if mode == "fusion":
        lines = ["| Method | Acc | AUC |", "|---|---|---|"]
        for r in table["rows"]:
            lines.append(f"| {VARIANT_LABELS[r['variant']]} | {_pct(r['acc_mean'], r['acc_std'])} "
                         f"| {_pct(r['auc_mean'], r['auc_std'])} |")
    elif mode == "blocks":
        lines = ["| Method | Acc |", "|---|---|", ]
        for r in table["rows"]:
            if r["mixed"]:
                label = "Backbone w/ features from PE, the first, middle and last Transformer blocks, and the Conv block"
            else:
                label = f"Backbone w/ all five features from {TAP_LABELS[r['tap_assignment'][0]]}"
            lines.append(f"| {label} | {_pct(r['acc_mean'], r['acc_std'])} |")
    elif mode == "fractions":
        fractions = sorted({r["fraction"] for r in table["rows"]})
        head = " | ".join(f"{100 * p:g}% Acc | {100 * p:g}% AUC" for p in fractions)
        lines = [f"| Method | {head} |", "|---" * (1 + 2 * len(fractions)) + "|"]
        for v in dict.fromkeys(r["variant"] for r in table["rows"]):
            cells = []
            for p in fractions:
                r = next(x for x in table["rows"] if x["variant"] == v and x["fraction"] == p)
                cells += [_pct(r["acc_mean"], r["acc_std"]), _pct(r["auc_mean"], r["auc_std"])]
            lines.append(f"| {VARIANT_LABELS[v]} | " + " | ".join(cells) + " |")
        if table.get("improvements"):
            cells = []
            for imp in table["improvements"]:
                cells += [f"{100 * imp['acc_improvement']:+.2f}", f"{100 * imp['auc_improvement']:+.2f}"]
            lines.append("| Improvement | " + " | ".join(cells) + " |")
    else:
        raise ValueError(f"unknown table mode {mode!r}")
    return "\n".join(lines) + "\n"
