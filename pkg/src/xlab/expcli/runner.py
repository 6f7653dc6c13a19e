"""Grid runner: worlds, cached backbones, victims, attacks, records, reports."""

from __future__ import annotations

import csv
import logging
import math
import os
import statistics
import time
import traceback
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .. import datagen, evalkit, modelzoo, thief, victim_api
from ..errors import ConfigError, ParseError
from ..numcore import RngStream, SgdHyper, derive_seed
from .config import ExperimentConfig

logger = logging.getLogger(__name__)


@dataclass
class ResultRecord:
    victim_spec: str
    victim_mode: str
    thief_spec: str
    thief_mode: str
    strategy: str
    budget: int
    seed: int
    victim_accuracy: float
    thief_accuracy: float
    thief_agreement: float
    backbone_silhouette: float
    wall_time: float = 0.0
    error: str = ""

    @property
    def key(self) -> tuple:
        return (self.victim_spec, self.victim_mode, self.thief_spec, self.thief_mode, self.strategy, self.budget, self.seed)

    @property
    def ok(self) -> bool:
        return not self.error


# wall_time is nondeterministic, so it lives in timings.csv instead of results.csv
RESULT_COLUMNS = [f.name for f in fields(ResultRecord) if f.name != "wall_time"]
KEY_COLUMNS = RESULT_COLUMNS[:7]
METRIC_COLUMNS = ["victim_accuracy", "thief_accuracy", "thief_agreement", "backbone_silhouette"]


def _fmt(value):
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def write_results(records, path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, c)) for c in RESULT_COLUMNS])
    os.replace(tmp, path)


def read_results(path) -> list[ResultRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"{path}: missing columns {sorted(missing)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(
                    ResultRecord(
                        victim_spec=row["victim_spec"],
                        victim_mode=row["victim_mode"],
                        thief_spec=row["thief_spec"],
                        thief_mode=row["thief_mode"],
                        strategy=row["strategy"],
                        budget=int(row["budget"]),
                        seed=int(row["seed"]),
                        victim_accuracy=float(row["victim_accuracy"]),
                        thief_accuracy=float(row["thief_accuracy"]),
                        thief_agreement=float(row["thief_agreement"]),
                        backbone_silhouette=float(row["backbone_silhouette"]),
                        error=row.get("error", ""),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
    return out


# -- world construction ------------------------------------------------------------


@dataclass(eq=False)
class World:
    """Everything derived from one replicate seed: family, victim task and proxy pool."""

    seed: int
    family_seed: int
    family: datagen.TaskFamily
    pretrain_order: tuple[int, ...]
    train: datagen.Dataset
    test: datagen.Dataset
    pool: datagen.Dataset


def build_world(cfg: ExperimentConfig, seed: int) -> World:
    fs = derive_seed(cfg.family.seed, "replicate", seed)
    fam = datagen.make_task_family(fs, cfg.family.input_dim, cfg.family.concepts, cfg.family.scale)
    order = datagen.choose_concepts(fam, fam.concepts, derive_seed(fs, "pretrain-concepts"))
    task_seed = derive_seed(fs, "victim-task")
    t = cfg.task
    train = datagen.sample_classification_task(
        fam, t.classes, task_seed, t.noise_sigma, t.train_per_class, sample_seed=derive_seed(fs, "victim-train")
    )
    test = datagen.sample_classification_task(
        fam, t.classes, task_seed, t.noise_sigma, t.test_per_class,
        sample_seed=derive_seed(fs, "victim-test"), split_tag="test",
    )
    pool = datagen.sample_proxy_pool(
        fam, cfg.pool.size, cfg.pool.overlap, derive_seed(fs, "proxy-pool"),
        task_concepts=train.class_concepts, noise_sigma=cfg.pool.noise_sigma,
    )
    return World(seed, fs, fam, order, train, test, pool)


class Lab:
    """Caches backbones (memory + disk), victims and worlds for one experiment directory."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.out)
        self.cache_dir = self.out / "cache"
        self._worlds: dict[int, World] = {}
        self._backbones: dict[tuple, modelzoo.Backbone] = {}
        self._victims: dict[tuple, tuple] = {}
        self._silhouettes: dict[tuple, float] = {}

    def world(self, seed: int) -> World:
        if seed not in self._worlds:
            self._worlds[seed] = build_world(self.cfg, seed)
        return self._worlds[seed]

    def _backbone_key(self, name, seed):
        cfg = self.cfg
        return cfg.fingerprint("backbone", cfg.spec(name).to_dict(), cfg.family, cfg.pretrain, seed)

    def pretrain_data(self, name: str, seed: int) -> datagen.Dataset:
        world = self.world(seed)
        spec = self.cfg.spec(name)
        concepts = world.pretrain_order[: spec.pretrain_classes]
        return datagen.sample_classification_task(
            world.family, spec.pretrain_classes, 0, self.cfg.pretrain.noise_sigma, spec.pretrain_samples_per_class,
            sample_seed=derive_seed(world.family_seed, "pretrain-samples", name), concepts=concepts,
        )

    def fresh_backbone(self, name: str, seed: int) -> modelzoo.Backbone:
        p = self.cfg.pretrain
        world = self.world(seed)
        hyper = SgdHyper(p.learning_rate, p.momentum, p.weight_decay, 10.0, p.decay_every)
        rng = RngStream(derive_seed(world.family_seed, "pretrain", name))
        return modelzoo.pretrain_backbone(self.cfg.spec(name), self.pretrain_data(name, seed), hyper, rng,
                                          epochs=p.epochs, batch_size=p.batch_size)

    def backbone(self, name: str, seed: int) -> modelzoo.Backbone:
        mem_key = (name, seed)
        if mem_key in self._backbones:
            return self._backbones[mem_key]
        path = self.cache_dir / "backbones" / f"{name}-s{seed}-{self._backbone_key(name, seed)}.xlab"
        if path.exists():
            bb = modelzoo.load_backbone(path)
        else:
            bb = self.fresh_backbone(name, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            modelzoo.save_backbone(bb, path)
        self._backbones[mem_key] = bb
        return bb

    def backbone_silhouette(self, name: str, seed: int) -> float:
        key = (name, seed)
        if key not in self._silhouettes:
            world = self.world(seed)
            feats = modelzoo.extract_features(self.backbone(name, seed), world.test.features)
            self._silhouettes[key] = evalkit.silhouette(feats, world.test.labels, seed=derive_seed(world.family_seed, "silhouette"))
        return self._silhouettes[key]

    def victim(self, name: str, mode: str, seed: int):
        """Trained victim model, its test accuracy and its test predictions."""
        key = (name, mode, seed)
        if key not in self._victims:
            world = self.world(seed)
            v = self.cfg.victim
            rng = RngStream(derive_seed(world.family_seed, "victim", name, mode))
            model, _ = modelzoo.train_model(self.backbone(name, seed), world.train, mode, v.hyper(), v.epochs, rng, v.batch_size)
            preds = modelzoo.predict(model, world.test.features)
            self._victims[key] = (model, evalkit.accuracy(preds, world.test.labels), preds)
        return self._victims[key]

    def run_cell(self, victim_spec, victim_mode, thief_spec, thief_mode, strategy, budget, seed) -> ResultRecord:
        cfg = self.cfg
        start = time.perf_counter()
        world = self.world(seed)
        model, victim_acc, victim_preds = self.victim(victim_spec, victim_mode, seed)
        endpoint = victim_api.deploy(model, cfg.attack.label_mode, budget)
        attack_seed = derive_seed(world.family_seed, "attack", victim_spec, victim_mode, thief_spec, thief_mode, strategy, budget)
        acfg = thief.AttackConfig(
            budget=budget,
            strategy=thief.default_strategy(strategy, cfg.attack.rounds),
            thief_backbone=self.backbone(thief_spec, seed),
            thief_training_mode=thief_mode,
            hyper=cfg.thief.hyper(),
            seed=attack_seed,
            epochs=cfg.thief.epochs,
            batch_size=cfg.thief.batch_size,
            kcenter_space=cfg.attack.kcenter_space,
        )
        if cfg.attack.transport == "http":
            with victim_api.serve(endpoint) as server:
                substitute, transcript = thief.run_attack(acfg, victim_api.RemoteClient(server.url), world.pool)
        else:
            substitute, transcript = thief.run_attack(acfg, endpoint, world.pool)
        if transcript.total_spent != endpoint.ledger.spent:
            raise RuntimeError("transcript and victim ledger disagree on spent queries")
        thief_preds = modelzoo.predict(substitute, world.test.features)
        result = evalkit.evaluate(thief_preds, victim_preds, world.test.labels)
        return ResultRecord(
            victim_spec, victim_mode, thief_spec, thief_mode, strategy, budget, seed,
            victim_accuracy=victim_acc,
            thief_accuracy=result.accuracy,
            thief_agreement=result.agreement,
            backbone_silhouette=self.backbone_silhouette(victim_spec, seed),
            wall_time=time.perf_counter() - start,
        )


def grid_cells(cfg: ExperimentConfig, budgets=None):
    """Cells in canonical order; records are stored in this order."""
    budgets = cfg.attack.budgets if budgets is None else budgets
    for seed in cfg.seeds:
        for v_spec, v_mode in cfg.victim.grid():
            thieves = list(cfg.thief_grid())
            if cfg.attack.same_as_victim:
                thieves = [(v_spec, m) for m in dict.fromkeys(m for _, m in thieves)]
            for t_spec, t_mode in thieves:
                for strategy in cfg.attack.strategies:
                    for budget in budgets:
                        yield (v_spec, v_mode, t_spec, t_mode, strategy, int(budget), int(seed))


def run_experiment(cfg: ExperimentConfig, out_dir=None, budgets=None, progress=None) -> list[ResultRecord]:
    """Run every grid cell not already in ``<out>/results.csv``; returns all records in grid order.

    Cells that previously failed are retried. Failures are recorded with an
    ``error`` tag and do not stop the run.
    """
    cfg.validate()
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    existing = {}
    if results_path.exists():
        existing = {r.key: r for r in read_results(results_path) if r.ok}
    lab = Lab(cfg, out)
    cells = list(grid_cells(cfg, budgets))
    records = {}
    timings = []
    for i, cell in enumerate(cells):
        if cell in existing:
            records[cell] = existing[cell]
            continue
        try:
            rec = lab.run_cell(*cell)
        except Exception as exc:  # a broken cell must not sink the grid
            logger.error("cell %s failed: %s", cell, exc)
            logger.debug("%s", traceback.format_exc())
            nan = float("nan")
            rec = ResultRecord(*cell, nan, nan, nan, nan, error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
        records[cell] = rec
        timings.append((cell, rec.wall_time))
        if progress:
            progress(i + 1, len(cells), rec)
        # keep previously stored cells from other grids (e.g. sweeps) alongside this one
        ordered = [records[c] for c in cells if c in records]
        extra = [r for k, r in existing.items() if k not in records and k not in set(cells)]
        write_results(ordered + sorted(extra, key=lambda r: r.key), results_path)
    ordered = [records[c] for c in cells]
    extra = [r for k, r in existing.items() if k not in set(cells)]
    write_results(ordered + sorted(extra, key=lambda r: r.key), results_path)
    if timings:
        timing_path = out / "timings.csv"
        new = not timing_path.exists()
        with open(timing_path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(KEY_COLUMNS + ["wall_time"])
            for cell, wt in timings:
                writer.writerow(list(cell) + [f"{wt:.3f}"])
    return ordered


def sweep_budget(cfg: ExperimentConfig, budgets, out_dir=None, progress=None) -> list[ResultRecord]:
    budgets = [int(b) for b in budgets]
    if budgets != sorted(budgets):
        raise ConfigError("budgets must be ascending")
    if max(budgets) > cfg.pool.size:
        raise ConfigError("pool is smaller than the largest budget")
    return run_experiment(cfg, out_dir, budgets=budgets, progress=progress)


# -- reporting ----------------------------------------------------------------


GROUP_COLUMNS = KEY_COLUMNS[:6]


def summarize(records) -> list[dict]:
    """Mean and sample standard deviation of each metric per cell, across seeds."""
    groups: dict[tuple, list[ResultRecord]] = {}
    for rec in records:
        if rec.ok:
            groups.setdefault(rec.key[:6], []).append(rec)
    rows = []
    for key, recs in groups.items():
        row = dict(zip(GROUP_COLUMNS, key))
        row["n_seeds"] = len(recs)
        for metric in METRIC_COLUMNS:
            values = [getattr(r, metric) for r in recs]
            row[f"{metric}_mean"] = statistics.fmean(values)
            row[f"{metric}_std"] = statistics.stdev(values) if len(values) > 1 else 0.0
        rows.append(row)
    return rows


SUMMARY_COLUMNS = GROUP_COLUMNS + ["n_seeds"] + [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "std")]


def report(records, out_dir, formats=("table", "plotdata")) -> list[Path]:
    """Write ``summary.csv`` (table) and/or ``plotdata.csv`` (long form)."""
    records = list(records)
    if not records:
        raise ConfigError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "table" in formats:
        path = out / "summary.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SUMMARY_COLUMNS)
            for row in summarize(records):
                writer.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
        written.append(path)
    if "plotdata" in formats:
        path = out / "plotdata.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(KEY_COLUMNS + ["metric", "value"])
            for rec in records:
                if not rec.ok:
                    continue
                for metric in METRIC_COLUMNS:
                    writer.writerow([_fmt(getattr(rec, c)) for c in KEY_COLUMNS] + [metric, _fmt(getattr(rec, metric))])
        written.append(path)
    return written


def format_table(records) -> str:
    """Human-readable summary; seed replication is flagged because single runs are the norm."""
    rows = summarize(records)
    lines = [
        "mean ± std over seeds (replication across seeds is an addition for stability)",
        f"{'victim':<22}{'thief':<22}{'strategy':<10}{'budget':>7}{'n':>3}  {'victim acc':>15}  {'thief acc':>15}  {'agreement':>15}",
    ]
    for r in rows:
        def ms(m):
            return f"{100 * r[m + '_mean']:6.2f}±{100 * r[m + '_std']:5.2f}"

        lines.append(
            f"{r['victim_spec'] + '/' + r['victim_mode']:<22}{r['thief_spec'] + '/' + r['thief_mode']:<22}"
            f"{r['strategy']:<10}{r['budget']:>7}{r['n_seeds']:>3}  {ms('victim_accuracy'):>15}  "
            f"{ms('thief_accuracy'):>15}  {ms('thief_agreement'):>15}"
        )
    return "\n".join(lines)


def mean_metric(records, metric="thief_agreement", **match) -> float:
    values = [getattr(r, metric) for r in records if r.ok and all(getattr(r, k) == v for k, v in match.items())]
    if not values:
        raise ConfigError(f"no records match {match}")
    return float(np.mean(values))
