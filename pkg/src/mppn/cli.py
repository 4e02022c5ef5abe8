"""Command-line pipeline: encode, pretrain, represent, finetune, evaluate, retrieve, project.

Settings come from an optional YAML ``--config`` file; command-line flags
override it.  Exit codes: 0 success, 1 validation/config error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import net, plotting, retrieval, synth, tasks, train
from .eventlog import EventLog, LogParseError, SchemaError, filter_by_length, parse_log, variant_ids
from .gafenc import CaseEncoder, export_grayscale

logger = logging.getLogger("mppn")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    log: str | None = None
    schema: str | None = None
    out: str = "runs/default"
    perspectives: list[str] = field(default_factory=list)
    n: int = 64
    max_len: int = 64
    seed: int = 0
    run: int = 0
    batch_size: int = 512
    max_epochs: int = 30
    patience: int = 5
    lr_min: float = 1e-4
    lr_max: float = 1e-3
    cycle_length: int | None = None
    lr_find: bool = False

    def train_config(self, **kw) -> train.TrainConfig:
        return train.TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
                                 lr_min=self.lr_min, lr_max=self.lr_max, cycle_length=self.cycle_length,
                                 seed=self.seed, **kw)


RUN_KEYS = {f for f in RunConfig.__dataclass_fields__}


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="YAML file with run settings")
    g.add_argument("--log", help="event log CSV")
    g.add_argument("--schema", help="schema config YAML for the log")
    g.add_argument("--out", help="output directory (default runs/default)")
    g.add_argument("--perspectives", help="comma-separated attributes to encode (default: all but the case id)")
    g.add_argument("--n", type=int, help="GAF side length / padded case length (default 64)")
    g.add_argument("--max-len", type=int, help="drop cases longer than this (default 64)")
    g.add_argument("--seed", type=int, help="seed for split, initialization and shuffling (default 0)")
    g.add_argument("--run", type=int, help="run index; varies the train/validation split (default 0)")
    g.add_argument("--batch-size", type=int, help="mini-batch size (default 512)")
    g.add_argument("--max-epochs", type=int, help="epoch budget (default 30)")
    g.add_argument("--patience", type=int, help="early-stopping patience in epochs (default 5)")
    g.add_argument("--lr-min", type=float, help="lower cyclical learning rate (default 1e-4)")
    g.add_argument("--lr-max", type=float, help="upper cyclical learning rate (default 1e-3)")
    g.add_argument("--cycle-length", type=int, help="half-cycle length in steps (default: two epochs)")
    g.add_argument("--lr-find", action="store_true", default=None,
                   help="pick lr_max with the learning-rate range test, lr_min = lr_max / 10")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mppn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="write per-case, per-perspective GAF images (PGM) and a manifest")
    _add_common(p)
    p.add_argument("--limit", type=int, help="only encode the first N cases")

    p = sub.add_parser("pretrain", help="variant-classification pretraining of the shared CNN")
    _add_common(p)
    p.add_argument("--min-support", type=int, default=5, help="minimum cases per variant class (default 5)")

    p = sub.add_parser("represent", help="self-supervised multi-task next-event representation learning")
    _add_common(p)
    p.add_argument("--cnn1", help="CNN1 checkpoint to start from (default: <out>/cnn1.ckpt if present)")
    p.add_argument("--complete", action="store_true", help="train on complete cases instead of prefixes")

    p = sub.add_parser("finetune", help="fine-tune a task head on the pretrained trunk")
    _add_common(p)
    _add_task(p)
    p.add_argument("--freeze-trunk", action="store_true", help="train the head only")
    p.add_argument("--trunk-lr-factor", type=float, default=0.1,
                   help="trunk learning rate relative to the head (default 0.1)")

    p = sub.add_parser("evaluate", help="score a fine-tuned head on the test cases")
    _add_common(p)
    _add_task(p)

    p = sub.add_parser("retrieve", help="nearest cases by feature-vector cosine distance, with audits")
    _add_common(p)
    p.add_argument("--query", action="append", required=True, help="query case id (repeatable)")
    p.add_argument("-k", type=int, default=7, help="neighbours per query (default 7)")

    p = sub.add_parser("project", help="2-D PCA projection of all case feature vectors")
    _add_common(p)
    p.add_argument("--dims", type=int, default=2, help="number of components (default 2)")

    p = sub.add_parser("synth", help="write a synthetic event log and its schema")
    p.add_argument("kind", choices=["branch", "variants", "groups"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cases", type=int, default=2000, help="cases (branch) / cases per group (groups)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    return parser


def _add_task(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=["nsp", "out"], required=True, help="next-step or outcome prediction")
    p.add_argument("--attribute", required=True, help="attribute to predict")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: expected a mapping")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = set(doc) - RUN_KEYS
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")
        values.update(doc)
    for key in RUN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if isinstance(values.get("perspectives"), str):
        values["perspectives"] = [p.strip() for p in values["perspectives"].split(",") if p.strip()]
    cfg = RunConfig(**values)
    if not cfg.log or not cfg.schema:
        raise ConfigError("--log and --schema are required (flag or config file)")
    return cfg


@dataclass
class Prepared:
    log: EventLog
    split: tasks.Split
    train: list
    val: list
    test: list


def prepare(cfg: RunConfig) -> Prepared:
    log = parse_log(cfg.log, cfg.schema)
    names = [a.name for a in log.schema]
    if not cfg.perspectives:
        cfg.perspectives = [a.name for a in log.schema if a.role != "case_id"]
    bad = [p for p in cfg.perspectives if p not in names or log.attribute(p).role == "case_id"]
    if bad:
        raise ConfigError(f"perspectives not usable with this schema: {', '.join(bad)}")
    log = filter_by_length(log, cfg.max_len)
    split = tasks.split_cases(log.case_ids, cfg.seed, cfg.run)
    tr, va, te = split.partition(log.cases)
    return Prepared(log, split, tr, va, te)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _announce(cfg: RunConfig, command: str, **extra) -> None:
    print(json.dumps({"command": command, **asdict(cfg), **extra}, sort_keys=True))


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found; run `mppn {command}` first")
    return path


def _tag(task: str, attribute: str) -> str:
    return f"{task}_{attribute}".replace("/", "_").replace(" ", "_")


def cmd_encode(cfg: RunConfig, args) -> None:
    prep = prepare(cfg)
    _announce(cfg, "encode")
    out = _out(cfg) / "gaf"
    out.mkdir(exist_ok=True)
    enc = CaseEncoder.fit(prep.log, prep.train, cfg.perspectives, cfg.n)
    cases = prep.log.cases[: args.limit] if args.limit else prep.log.cases
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for i, case in enumerate(cases):
            # case ids may contain characters that are unsafe in paths
            folder = out / f"{i:06d}"
            folder.mkdir(exist_ok=True)
            for img in enc.encode_case(case):
                path = folder / f"{cfg.perspectives.index(img.attribute):02d}.pgm"
                export_grayscale(img, path)
                digest = hashlib.sha256(path.read_bytes()).hexdigest()
                fh.write(json.dumps({"case_id": case.case_id, "perspective": img.attribute, "n": img.n,
                                     "path": str(path.relative_to(out)), "sha256": digest}, sort_keys=True) + "\n")
    (out / "encoder.json").write_text(json.dumps(enc.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
    if cases:
        imgs = enc.encode_case(cases[0])
        plotting.plot_gafs([im.matrix for im in imgs], [im.attribute for im in imgs], out / "preview.png")
    print(f"encoded {len(cases)} cases x {len(cfg.perspectives)} perspectives into {out}")


def _maybe_lr_find(cfg: RunConfig, model: net.MppnModel, cases, heads) -> None:
    if not cfg.lr_find:
        return
    data = tasks.build_prefix_data(cases, model.encoder, heads)
    loss_fn = train.multitask_loss(model)
    bs = min(cfg.batch_size, len(data))

    def batches():
        return train._batches(data, bs, np.random.default_rng(cfg.seed))

    res = train.lr_find(model, batches, lambda b: loss_fn(*b)[0], 1e-6, 1.0, steps=60)
    cfg.lr_max, cfg.lr_min = res.lr, res.lr / 10
    print(f"lr finder: lr_max={cfg.lr_max:.3g} lr_min={cfg.lr_min:.3g}")


def cmd_pretrain(cfg: RunConfig, args) -> None:
    prep = prepare(cfg)
    _announce(cfg, "pretrain", min_support=args.min_support)
    out = _out(cfg)
    model = net.MppnModel.build([prep.log.activity], cfg.n, seed=cfg.seed)
    report = train.pretrain_variant(model, prep.log.subset(c.case_id for c in prep.train), args.min_support,
                                    cfg.train_config(), out / "cnn1.ckpt", out / "metrics_pretrain.csv")
    plotting.plot_history(report.fit.history, out / "metrics_pretrain.png", "variant pretraining")
    print(f"variant pretraining: {report.classes} classes, {report.cases} cases, "
          f"train accuracy {report.accuracy:.4f}; wrote {out / 'cnn1.ckpt'}")


def cmd_represent(cfg: RunConfig, args) -> None:
    prep = prepare(cfg)
    _announce(cfg, "represent", complete=args.complete)
    out = _out(cfg)
    enc = CaseEncoder.fit(prep.log, prep.train, cfg.perspectives, cfg.n)
    model = net.MppnModel.build(cfg.perspectives, cfg.n, encoder=enc, seed=cfg.seed)
    cnn1 = Path(args.cnn1) if args.cnn1 else out / "cnn1.ckpt"
    if args.cnn1 or cnn1.exists():
        net.load_cnn1(model, _need(cnn1, "pretrain"))
        print(f"starting from CNN1 weights in {cnn1}")
    if cfg.lr_find:
        for name, (task, attr) in train.representation_heads(model).items():
            model.add_task_head(task, attr)
        _maybe_lr_find(cfg, model, prep.train, train.representation_heads(model))
        model.drop_heads()
    result = train.pretrain_representation(model, prep.train, prep.val, cfg.train_config(),
                                           out / "metrics_represent.csv", out / "trunk.ckpt", args.complete)
    plotting.plot_history(result.history, out / "metrics_represent.png", "representation learning")
    print(f"representation learning: best epoch {result.best_epoch}, wrote {out / 'trunk.ckpt'}")


def cmd_finetune(cfg: RunConfig, args) -> None:
    prep = prepare(cfg)
    _announce(cfg, "finetune", task=args.task, attribute=args.attribute, freeze_trunk=args.freeze_trunk)
    out = _out(cfg)
    model = net.load_checkpoint(_need(out / "trunk.ckpt", "represent"))
    if args.attribute not in model.perspectives:
        raise ConfigError(f"attribute {args.attribute!r} is not among the trunk perspectives {model.perspectives}")
    tag = _tag(args.task, args.attribute)
    if cfg.lr_find:
        model.add_task_head(args.task, args.attribute)
        _maybe_lr_find(cfg, model, prep.train, {f"{args.task}:{args.attribute}": (args.task, args.attribute)})
    tcfg = cfg.train_config(freeze_trunk=args.freeze_trunk, trunk_lr_factor=args.trunk_lr_factor)
    result = train.finetune(model, args.task, args.attribute, prep.train, prep.val, tcfg,
                            out / f"metrics_finetune-{tag}.csv", out / f"model-{tag}.ckpt")
    plotting.plot_history(result.history, out / f"metrics_finetune-{tag}.png", f"fine-tuning {tag}")
    print(f"fine-tuning {tag}: best epoch {result.best_epoch}, wrote {out / f'model-{tag}.ckpt'}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    prep = prepare(cfg)
    _announce(cfg, "evaluate", task=args.task, attribute=args.attribute)
    out = _out(cfg)
    tag = _tag(args.task, args.attribute)
    model = net.load_checkpoint(_need(out / f"model-{tag}.ckpt", "finetune"))
    if f"{args.task}:{args.attribute}" not in model.head_defs:
        raise ConfigError(f"model-{tag}.ckpt has no {args.task}:{args.attribute} head")
    res = tasks.evaluate(model, prep.test, args.task, args.attribute, cfg.batch_size)
    res.write_csv(out / f"eval-{tag}.csv")
    res.write_breakdown(out / f"eval-{tag}-by-length.csv")
    plotting.plot_breakdown(res.by_length, res.metric, out / f"eval-{tag}-by-length.png", tag)
    print(f"{tag}: {res.metric} = {res.value:.6f} over {res.count} test prefixes")


def _store(cfg: RunConfig, log: EventLog) -> tuple[retrieval.FvStore, net.MppnModel]:
    out = _out(cfg)
    ckpt = _need(out / "trunk.ckpt", "represent")
    checksum = ckpt.read_bytes()[-32:]
    model = net.load_checkpoint(ckpt)
    path = out / "store.fvs"
    if path.exists():
        store = retrieval.FvStore.load(path)
        if store.model_checksum == checksum and set(store.case_ids) == set(log.case_ids):
            return store, model
    store = retrieval.build_store(model, log, cfg.batch_size, checksum)
    store.save(path)
    return store, model


def cmd_retrieve(cfg: RunConfig, args) -> None:
    prep = prepare(cfg)
    _announce(cfg, "retrieve", query=args.query, k=args.k)
    out = _out(cfg)
    store, model = _store(cfg, prep.log)
    audited = [p for p in model.perspectives if model.encoder.kinds[p] != "categorical"]
    for q in args.query:
        res = retrieval.audit(retrieval.retrieve(store, q, args.k), prep.log, audited, model.encoder)
        path = out / f"retrieve-{q}.csv"
        res.write_csv(path, audited)
        print(f"query {q}: {len(res.neighbors)} neighbours -> {path}")
        for nb in res.neighbors:
            maes = " ".join(f"{p}={nb.mae[p]:.2f}" for p in audited)
            print(f"  {nb.case_id:>12}  d={nb.distance:.5f}  DLD={nb.dld}  {maes}")


def cmd_project(cfg: RunConfig, args) -> None:
    prep = prepare(cfg)
    _announce(cfg, "project", dims=args.dims)
    out = _out(cfg)
    store, _ = _store(cfg, prep.log)
    proj = retrieval.project_pca(store, args.dims)
    vids = dict(zip(prep.log.case_ids, variant_ids(prep.log)))
    variants = [vids[c] for c in proj.case_ids]
    proj.write_csv(out / "projection.csv", variants)
    if args.dims >= 2:
        plotting.plot_projection(proj.coords, variants, out / "projection.png", proj.explained_ratio)
    ratios = ", ".join(f"{r:.3f}" for r in proj.explained_ratio)
    print(f"projected {len(proj.case_ids)} cases; explained variance ratios {ratios}")


def cmd_synth(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "branch":
        log = synth.branch_log(args.cases, args.seed)
    elif args.kind == "variants":
        log = synth.variant_log(seed=args.seed)
    else:
        log, _ = synth.two_group_log(args.cases, args.seed)
    synth.write_csv(log, out / "log.csv")
    synth.write_schema(log, out / "schema.yaml")
    print(f"wrote {len(log)} cases to {out / 'log.csv'} with schema {out / 'schema.yaml'}")


COMMANDS = {"encode": cmd_encode, "pretrain": cmd_pretrain, "represent": cmd_represent,
            "finetune": cmd_finetune, "evaluate": cmd_evaluate, "retrieve": cmd_retrieve,
            "project": cmd_project}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    net.set_threads()
    try:
        if args.command == "synth":
            cmd_synth(args)
            return 0
        cfg = resolve_config(args)
        torch.manual_seed(cfg.seed)
        COMMANDS[args.command](cfg, args)
    except (SchemaError, LogParseError, ConfigError, net.CheckpointError, ValueError, KeyError,
            yaml.YAMLError) as exc:
        print(f"mppn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mppn {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
