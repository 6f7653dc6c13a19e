"""``xlab`` command line: pretrain, train-victim, serve, steal, evaluate, run, sweep, report, check."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import datagen, evalkit, modelzoo, thief, victim_api
from ..errors import XlabError
from ..numcore import RngStream, derive_seed
from . import checks
from .config import ExperimentConfig, canonical_mode, load_config
from .presets import default_config, sweep_config
from .runner import Lab, format_table, read_results, report, run_experiment, sweep_budget

logger = logging.getLogger("xlab")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "seed", None) is not None and args.command in ("run", "sweep"):
        cfg.seeds = [args.seed]
    if getattr(args, "strategy", None) and args.command in ("run", "sweep"):
        cfg.attack.strategies = [args.strategy]
    if getattr(args, "budget", None) and args.command == "run":
        cfg.attack.budgets = [int(b) for b in args.budget]
    if getattr(args, "in_process", False):
        cfg.attack.transport = "in-process"
    return cfg.validate()


def _out(args, cfg=None) -> Path:
    out = Path(args.out or (cfg.out if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(done, total, rec):
    status = "ok" if rec.ok else f"ERROR {rec.error}"
    logger.info("[%d/%d] %s/%s <- %s/%s %s@%d seed %d: agreement %.4f %s", done, total, rec.victim_spec,
                rec.victim_mode, rec.thief_spec, rec.thief_mode, rec.strategy, rec.budget, rec.seed,
                rec.thief_agreement, status)


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    lab = Lab(cfg, out)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    names = args.spec or list(cfg.backbones)
    for name in names:
        bb = lab.backbone(name, seed)
        path = out / f"backbone-{name}-s{seed}.xlab"
        modelzoo.save_backbone(bb, path)
        print(f"{path}  silhouette on victim test set: {lab.backbone_silhouette(name, seed):.4f}")
    return 0


def cmd_train_victim(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    mode = canonical_mode(args.mode)
    if args.train:
        train = datagen.load_dataset(args.train)
        if train.labels is None:
            raise XlabError(f"{args.train} has no labels")
        cfg.family.input_dim = train.dim
        cfg.task.classes = train.class_count
    lab = Lab(cfg, out)
    world = lab.world(seed)
    if args.train:
        train = train.with_labels(train.labels, split_tag="train")
    else:
        train = world.train
    test = datagen.load_dataset(args.test) if args.test else world.test
    rng = RngStream(derive_seed(world.family_seed, "victim", args.spec, mode))
    v = cfg.victim
    model, rep = modelzoo.train_model(lab.backbone(args.spec, seed), train, mode, v.hyper(), v.epochs, rng, v.batch_size)
    model_path = out / f"victim-{args.spec}-{mode}-s{seed}.xlab"
    modelzoo.save_model(model, model_path)
    datagen.save_dataset(test.with_labels(test.labels, split_tag="test"), out / f"test-s{seed}.csv")
    datagen.save_dataset(world.pool, out / f"pool-s{seed}.csv")
    acc = evalkit.accuracy(modelzoo.predict(model, test.features), test.labels)
    print(json.dumps({"model": str(model_path), "validation_accuracy": rep.best_validation_accuracy,
                      "selected_epoch": rep.selected_epoch, "test_accuracy": acc}))
    return 0


def cmd_serve(args) -> int:
    model = modelzoo.load_model(args.model)
    endpoint = victim_api.deploy(model, args.label_mode, args.budget)
    host, _, port = args.address.rpartition(":")
    server = victim_api.VictimServer(endpoint, (host or "127.0.0.1", int(port)))
    print(f"serving {args.model} at {server.url} (budget {args.budget or 'unlimited'})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_steal(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    budget = int(args.budget[0]) if args.budget else cfg.attack.budgets[0]
    strategy = args.strategy or cfg.attack.strategies[0]
    lab = Lab(cfg, out)
    if args.pool:
        pool = datagen.load_dataset(args.pool, split_tag="pool")
        if args.spec not in cfg.backbones or pool.dim != cfg.family.input_dim:
            cfg.family.input_dim = pool.dim
    else:
        pool = lab.world(seed).pool
    if args.endpoint:
        client = victim_api.RemoteClient(args.endpoint)
    else:
        if not args.victim:
            raise XlabError("--in-process attacks need --victim <model file>")
        client = victim_api.deploy(modelzoo.load_model(args.victim), cfg.attack.label_mode, budget)
    acfg = thief.AttackConfig(
        budget=budget,
        strategy=thief.default_strategy(strategy, cfg.attack.rounds),
        thief_backbone=lab.backbone(args.spec, seed),
        thief_training_mode=canonical_mode(args.mode),
        hyper=cfg.thief.hyper(),
        seed=derive_seed(seed, "cli-attack", args.spec, strategy, budget),
        epochs=cfg.thief.epochs,
        batch_size=cfg.thief.batch_size,
        kcenter_space=cfg.attack.kcenter_space,
    )
    substitute, transcript = thief.run_attack(acfg, client, pool)
    model_path = out / f"thief-{args.spec}-{acfg.thief_training_mode}-{strategy}-{budget}-s{seed}.xlab"
    transcript_path = model_path.with_suffix(".transcript.csv")
    modelzoo.save_model(substitute, model_path)
    transcript.save_csv(transcript_path)
    print(json.dumps({"model": str(model_path), "transcript": str(transcript_path), "spent": transcript.total_spent,
                      "truncated": transcript.truncated,
                      "per_round_validation_accuracy": transcript.per_round_validation_accuracy}))
    return 0


def cmd_evaluate(args) -> int:
    test = datagen.load_dataset(args.test)
    victim = modelzoo.load_model(args.victim)
    stolen = modelzoo.load_model(args.thief)
    vp = modelzoo.predict(victim, test.features)
    tp = modelzoo.predict(stolen, test.features)
    res = evalkit.evaluate(tp, vp, test.labels)
    payload = {"accuracy": res.accuracy, "agreement": res.agreement, "n_test": res.n_test,
               "victim_accuracy": evalkit.accuracy(vp, test.labels)}
    if test.class_count >= 2 and len(set(test.labels.tolist())) >= 2:
        feats = modelzoo.extract_features(victim.backbone, test.features)
        rep = evalkit.separability_report(feats, test.labels, "backbone_penultimate")
        payload["backbone_silhouette"] = rep.silhouette
        if args.export_projection:
            evalkit.export_projection(rep, args.export_projection)
            final = evalkit.separability_report(victim.logits(test.features), test.labels, "model_final")
            evalkit.export_projection(final, Path(args.export_projection).with_suffix(".final.csv"))
    print(json.dumps(payload))
    return 0


def _finish(records, out) -> int:
    report(records, out)
    print(format_table(records))
    failed = [r for r in records if not r.ok]
    for r in failed:
        print(f"ERROR in cell {r.key}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_run(args) -> int:
    cfg = _config(args)
    records = run_experiment(cfg, progress=_progress)
    return _finish(records, cfg.out)


def cmd_sweep(args) -> int:
    cfg = _config(args) if args.config else sweep_config()
    if args.out:
        cfg.out = args.out
    budgets = [int(b) for b in args.budget] if args.budget else cfg.attack.budgets
    records = sweep_budget(cfg, budgets, progress=_progress)
    return _finish(records, cfg.out)


def cmd_report(args) -> int:
    out = Path(args.out or ".")
    records = read_results(args.results or out / "results.csv")
    for path in report(records, out):
        print(path)
    print(format_table(records))
    return 0


def cmd_check(args) -> int:
    cfg = _config(args)
    records = run_experiment(cfg, progress=_progress)
    sweep_cfg = sweep_config()
    sweep_cfg.seeds = list(cfg.seeds)
    sweep_records = sweep_budget(sweep_cfg, sweep_cfg.attack.budgets, out_dir=Path(cfg.out) / "sweep", progress=_progress)
    results = checks.default_checks(records, sweep_records)
    for res in results:
        print(res.line())
    errored = any(not r.ok for r in records + sweep_records)
    return 1 if errored or not all(r.passed for r in results) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="TOML experiment config (defaults to the built-in grid)")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="replicate seed")
        return p

    p = common(sub.add_parser("pretrain", help="pretrain (or load cached) backbones for one seed"))
    p.add_argument("--spec", action="append", help="backbone name (repeatable; default: all)")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("train-victim", help="train one victim model"))
    p.add_argument("--spec", default="strong")
    p.add_argument("--mode", default="probe", choices=["probe", "finetune"])
    p.add_argument("--train", help="labeled dataset CSV to use instead of the synthetic task")
    p.add_argument("--test", help="labeled test CSV (default: the synthetic test split)")
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("serve", help="serve a victim model over HTTP")
    p.add_argument("--model", required=True)
    p.add_argument("--budget", type=int, default=0, help="query budget in samples (0 = unlimited)")
    p.add_argument("--address", default="127.0.0.1:8765")
    p.add_argument("--label-mode", default="hard", choices=["hard", "soft"])
    p.set_defaults(func=cmd_serve)

    p = common(sub.add_parser("steal", help="run one extraction attack"))
    p.add_argument("--spec", default="strong", help="thief backbone name")
    p.add_argument("--mode", default="probe", choices=["probe", "finetune"])
    p.add_argument("--budget", action="append")
    p.add_argument("--strategy", choices=list(thief.STRATEGIES))
    p.add_argument("--pool", help="unlabeled pool CSV (default: the synthetic proxy pool)")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--endpoint", help="victim URL, e.g. http://127.0.0.1:8765")
    target.add_argument("--in-process", action="store_true", help="load --victim directly, no network")
    p.add_argument("--victim", help="victim model file for --in-process")
    p.set_defaults(func=cmd_steal)

    p = sub.add_parser("evaluate", help="accuracy/agreement of a thief against a victim")
    p.add_argument("--victim", required=True)
    p.add_argument("--thief", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--export-projection", help="write 2-D PCA projection CSV (x, y, label)")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("run", cmd_run, "run the full grid"), ("sweep", cmd_sweep, "budget sweep")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--budget", action="append", help="budget (repeatable)")
        p.add_argument("--strategy", choices=list(thief.STRATEGIES))
        p.add_argument("--in-process", action="store_true", help="force in-process victim queries")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="summarise an existing results.csv")
    p.add_argument("--out", help="directory holding results.csv; summaries are written here")
    p.add_argument("--results", help="explicit results.csv path")
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("check", help="run the default grid and budget sweep, then verify the trends"))
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except XlabError as exc:
        print(f"xlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
