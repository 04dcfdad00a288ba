"""Command-line entry point: ``walklearn <command> [--config PATH] [--seed N] [--out DIR]``.

Every artifact lives under ``<out>/<stage>/<hash>/`` where the hash covers the
configuration the stage depends on, so runs with different settings never
collide and a replay of the same configuration rewrites identical bytes. Each
artifact directory also holds the resolved ``config.ini``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import model as M
from .config import ConfigError, RunConfig, dump_config, load_config, stage_hash
from .evaluator import (ARMS, accuracy_table, extract_features, finetune_train_config, fit_linear,
                        labelled_split, run_ablation, split_groups)
from .introspect import dump_images, purity, reports_json, top_neurons_per_class
from .pair_miner import PairSet, mine_pairs
from .synthetic_world import AttributeTruth, format_stats, generate_world, stats_json, world_stats
from .tensor_core.autodiff import NonFiniteError
from .track_store import StoreError, load_store
from .trainer import finetune_attributes, pretrain_verification, train_context_head

log = logging.getLogger("walklearn")

MASKS = ("id", "id+geo", "id+weather", "id+geo+weather")
PRODUCERS = {
    "world": "gen-world",
    "pairs": "mine-pairs",
    "verification": "pretrain",
    "context-geo": "train-context --head geo",
    "context-weather": "train-context --head weather",
}


class UsageError(Exception):
    pass


class Workspace:
    """Resolves artifact directories for one configuration."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = out

    def dir(self, stage, hash_stage=None, extra=None):
        h = stage_hash(self.cfg, hash_stage or stage, extra)
        return os.path.join(self.out, stage, h)

    def create(self, stage, hash_stage=None, extra=None):
        d = self.dir(stage, hash_stage, extra)
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "config.ini"), "w", encoding="utf-8") as fh:
            fh.write(dump_config(self.cfg))
        return d

    def require(self, stage, name, hash_stage=None):
        path = os.path.join(self.dir(stage, hash_stage), name)
        if not os.path.exists(path):
            raise UsageError(f"missing {path}; run `walklearn {PRODUCERS[stage]}` with the "
                             f"same configuration first")
        return path

    # loaders for upstream artifacts

    def world(self):
        store = load_store(self.require("world", "store.jsonl"))
        with open(self.require("world", "truth.csv"), encoding="utf-8") as fh:
            truth = AttributeTruth.from_csv(fh.read())
        return store, truth

    def pairs(self):
        with open(self.require("pairs", "pairs.csv"), encoding="utf-8") as fh:
            return PairSet.from_csv(fh.read())

    def branch(self, name):
        spec = self.cfg.resolved().model
        if name == "id":
            return M.ParamStore.load(self.require("verification", "params.wlck"), expect_spec=spec)
        stage = f"context-{name}"
        return M.ParamStore.load(self.require(stage, "params.wlck", hash_stage="context"),
                                 expect_spec=spec)

    def branches(self, mask):
        return {b: self.branch(b) for b in M.parse_mask(mask)}


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _accuracy_csv(acc, avg):
    lines = ["attribute,accuracy"]
    lines += [f"attr{i},{v:.4f}" for i, v in enumerate(acc)]
    lines.append(f"average,{avg:.4f}")
    return "\n".join(lines) + "\n"


# commands

def cmd_gen_world(ws, args):
    pc = ws.cfg.resolved()
    store, truth = generate_world(pc.world, pc.labels)
    d = ws.create("world")
    store.save(os.path.join(d, "store.jsonl"))
    _write(os.path.join(d, "truth.csv"), truth.to_csv())
    _write(os.path.join(d, "regions.csv"), pc.world.regions.to_csv())
    print(f"world: {len(store)} samples, {len(store.tracks)} tracks -> {d}")


def cmd_mine_pairs(ws, args):
    pc = ws.cfg.resolved()
    store, _ = ws.world()
    pairs = mine_pairs(store, pc.mining, pc.world.regions)
    d = ws.create("pairs")
    _write(os.path.join(d, "pairs.csv"), pairs.to_csv())
    _write_json(os.path.join(d, "pair_stats.json"), pairs.stats())
    print(f"pairs: {len(pairs)} -> {d}")


def cmd_pretrain(ws, args):
    pc = ws.cfg.resolved()
    store, _ = ws.world()
    pairs = ws.pairs()
    params, report = pretrain_verification(store, pairs, pc.model, pc.verification)
    d = ws.create("verification")
    params.save(os.path.join(d, "params.wlck"))
    _write_json(os.path.join(d, "report.json"), _stable_report(report))
    print(f"verification: final loss {report.epoch_loss[-1]:.5f} sha256 {report.checksum[:16]} -> {d}")


def _stable_report(report):
    # wall time is the only non-deterministic field; keep it out of the artifact
    d = report.to_dict()
    d.pop("wall_time", None)
    return d


def cmd_train_context(ws, args):
    pc = ws.cfg.resolved()
    store, _ = ws.world()
    verif = ws.branch("id")
    heads = ("geo", "weather") if args.head == "both" else (args.head,)
    for head in heads:
        labels = (store.geo_labels(pc.world.regions) if head == "geo"
                  else store.weather_labels(pc.labels))
        params, report = train_context_head(verif, store, head, pc.context, labels)
        d = ws.create(f"context-{head}", hash_stage="context")
        params.save(os.path.join(d, "params.wlck"))
        _write_json(os.path.join(d, "report.json"), _stable_report(report))
        acc = report.extra.get("train_accuracy", float("nan"))
        print(f"context {head}: train accuracy {acc:.3f} -> {d}")


def cmd_finetune(ws, args):
    pc = ws.cfg.resolved()
    store, truth = ws.world()
    mask = args.mask
    init = args.init
    branches = {} if init == "scratch" else ws.branches(mask)
    Y = truth.aligned(store)
    train, test = labelled_split(split_groups(truth, store), pc.eval.finetune_test_fraction,
                                 pc.eval.finetune_label_fraction, ws.cfg.seed)
    tc = finetune_train_config(pc.eval, init, ws.cfg.seed)
    am, report = finetune_attributes(branches, store.images[train], Y[train], tc, mask=mask,
                                     init=init, spec=pc.model)
    acc, avg = accuracy_table(am.predict(store.images[test]), Y[test])
    d = ws.create("finetune", extra={"mask": mask, "init": init})
    am.params.save(os.path.join(d, "params.wlck"))
    _write(os.path.join(d, "accuracy.csv"), _accuracy_csv(acc, avg))
    _write_json(os.path.join(d, "report.json"), _stable_report(report))
    print(f"finetune {init} {mask}: average accuracy {avg:.2f} -> {d}")


def cmd_evaluate(ws, args):
    pc = ws.cfg.resolved()
    store, truth = ws.world()
    mask = args.mask
    if args.init == "scratch":
        branches = {"id": M.init_verification(pc.model, ws.cfg.seed)}
        mask = "id"
    else:
        branches = ws.branches(mask)
    F = extract_features(branches, store.images, mask)
    Y = truth.aligned(store)
    train, test = labelled_split(split_groups(truth, store), pc.eval.linear_test_fraction, 1.0, ws.cfg.seed)
    preds = []
    for k in range(Y.shape[1]):
        clf = fit_linear(F[train], Y[train, k], pc.eval.svm_lambda, ws.cfg.seed, pc.eval.svm_epochs)
        preds.append(clf.predict(F[test]))
    acc, avg = accuracy_table(np.stack(preds, axis=1), Y[test])
    d = ws.create("evaluate", extra={"mask": mask, "init": args.init})
    with open(os.path.join(d, "features.npy"), "wb") as fh:
        np.save(fh, F)
    _write(os.path.join(d, "accuracy.csv"), _accuracy_csv(acc, avg))
    print(f"linear evaluation {args.init} {mask}: average accuracy {avg:.2f} -> {d}")


def cmd_ablate(ws, args):
    cfg = ws.cfg
    seeds = tuple(args.seeds) if args.seeds else cfg.ablation_seeds
    cfg = replace(cfg, ablation_seeds=seeds)
    ws = Workspace(cfg, ws.out)
    pc = cfg.pipeline
    result = run_ablation(seeds, pc, ARMS)
    d = ws.create("ablate")
    paths = list(result.scores)
    _write(os.path.join(d, "ablation.csv"), "".join(
        result.to_csv(p) if i == 0 else result.to_csv(p).split("\n", 1)[1]
        for i, p in enumerate(paths)))
    text = "\n\n".join(result.table(p) + "\n\n" + result.improvement_chart(p) for p in paths)
    if result.failures:
        text += "\n\nPARTIAL RESULT, failed seeds: " + ", ".join(str(s) for s, _ in result.failures)
    _write(os.path.join(d, "table.txt"), text + "\n")
    print(text)
    if result.failures and not result.seeds:
        raise UsageError("every seed failed")


def cmd_inspect(ws, args):
    pc = ws.cfg.resolved()
    ic = ws.cfg.introspect
    store, _ = ws.world()
    params = ws.branch(ic.branch)
    labels = store.geo_labels(pc.world.regions) if ic.branch != "weather" else store.weather_labels(pc.labels)
    reports = top_neurons_per_class(params, store, ic.layer, labels, ic.n, ic.k, ic.use_max,
                                    ic.standardize)
    score = purity(reports, dict(zip(store.sample_ids.tolist(), labels.tolist())))
    d = ws.create("inspect")
    _write(os.path.join(d, "neurons.json"),
           reports_json(reports, branch=ic.branch, layer=ic.layer, purity=score) + "\n")
    if ic.dump_images:
        dump_images(reports, store, os.path.join(d, "images"))
    print(f"inspect {ic.branch}/{ic.layer}: {len(reports)} neurons, class purity {score:.3f} -> {d}")


def cmd_stats(ws, args):
    pc = ws.cfg.resolved()
    store, truth = ws.world()
    pairs = None
    pairs_path = os.path.join(ws.dir("pairs"), "pairs.csv")
    if os.path.exists(pairs_path):
        pairs = ws.pairs()
    report = world_stats(store, truth, pc.world.regions, pc.labels, pairs)
    d = ws.dir("world")
    _write(os.path.join(d, "stats.txt"), format_stats(report) + "\n")
    _write(os.path.join(d, "stats.json"), stats_json(report) + "\n")
    print(format_stats(report))


COMMANDS = {
    "gen-world": (cmd_gen_world, "generate the synthetic world (store, truth, regions)"),
    "mine-pairs": (cmd_mine_pairs, "mine positive and negative pairs from the world"),
    "pretrain": (cmd_pretrain, "train the verification network on the mined pairs"),
    "train-context": (cmd_train_context, "train the location and/or weather networks"),
    "finetune": (cmd_finetune, "fine-tune an attribute model for one mask / init"),
    "evaluate": (cmd_evaluate, "linear SVM evaluation of frozen features"),
    "ablate": (cmd_ablate, "run every arm end to end over several seeds"),
    "inspect": (cmd_inspect, "rank class-related neurons and retrieve top samples"),
    "stats": (cmd_stats, "dataset statistics table for the world and pairs"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="walklearn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="sectioned key-value config file")
        p.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
        p.add_argument("--out", help="output directory (overrides [run] out, default runs)")
        if name in ("finetune", "evaluate"):
            p.add_argument("--mask", choices=MASKS, default="id")
            p.add_argument("--init", choices=("scratch", "pretrained"), default="pretrained")
        if name == "train-context":
            p.add_argument("--head", choices=("geo", "weather", "both"), default="both")
        if name == "ablate":
            p.add_argument("--seeds", type=int, nargs="+", help="world seeds (at least 3)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out:
            cfg = replace(cfg, out=args.out)
        fn, _ = COMMANDS[args.command]
        fn(Workspace(cfg, cfg.out), args)
    except UsageError as exc:
        print(f"walklearn {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, StoreError, NonFiniteError, ValueError, KeyError, OSError) as exc:
        print(f"walklearn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
