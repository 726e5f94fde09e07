"""Pipeline CLI: synth, ingest, compile, train, eval, ablate.

Each stage writes versioned artifacts into a run directory and snapshots
the resolved config next to them, so any run re-executes bit-identically
from (config, seed).  Every config field is overridable on the command
line as ``--section.field value``; ``KPROMPT_SEED`` overrides the seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import corpus, evaluation, pipeline, records, synth
from .errors import ConfigError, KpromptError
from .generate import BeamConfig
from .model import ModelConfig, ModelState, OptimizerConfig, load_checkpoint, save_checkpoint, train
from .prompts import Vocabulary, load_mpp_templates


@dataclass
class DataSection:
    interactions: str = ""
    triples: str = ""
    entity_names: str = ""
    item_entities: str = ""
    relation_templates: str = ""
    mpp_templates: str = ""
    min_user_count: int = 5
    min_item_count: int = 5


@dataclass
class PromptSection:
    template_id: int = 1
    max_history: int = 5
    max_input_tokens: int = 512
    hops: int = 1
    degree: int = 4


@dataclass
class ModelSection:
    layers_enc: int = 2
    layers_dec: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    max_len: int = 512
    dropout: float = 0.0
    use_positions: bool = True


@dataclass
class BeamSection:
    beam_width: int = 20
    k: int = 10
    max_target_len: int = 2


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: [5, 10])


@dataclass
class FlagsSection:
    mask: bool = True
    exclude_seen: bool = False
    mask_cross: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    beam: BeamSection = field(default_factory=BeamSection)
    eval: EvalSection = field(default_factory=EvalSection)
    flags: FlagsSection = field(default_factory=FlagsSection)

    def validate(self) -> None:
        if not 0 <= self.prompt.hops <= 3:
            raise ConfigError("prompt.hops", f"must be in 0..3, got {self.prompt.hops}")
        if self.prompt.degree < 1:
            raise ConfigError("prompt.degree", f"must be >= 1, got {self.prompt.degree}")
        if self.prompt.max_history < 1:
            raise ConfigError("prompt.max_history", f"must be >= 1, got {self.prompt.max_history}")
        if self.prompt.max_input_tokens < 4:
            raise ConfigError("prompt.max_input_tokens", "must be >= 4")
        if self.beam.k < 1:
            raise ConfigError("beam.k", f"must be >= 1, got {self.beam.k}")
        if self.beam.beam_width < self.beam.k:
            raise ConfigError(
                "beam.beam_width",
                f"must be >= beam.k, got {self.beam.beam_width} < {self.beam.k}",
            )
        if self.optim.epochs < 0:
            raise ConfigError("optim.epochs", "must be >= 0")
        if self.model.d_model % self.model.heads != 0:
            raise ConfigError("model.d_model", "must be divisible by model.heads")
        if not self.eval.ks:
            raise ConfigError("eval.ks", "must list at least one cutoff")


def _from_dict(cls, payload: dict, prefix: str = ""):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in payload.items():
        if key not in fields:
            raise ConfigError(prefix + key, "unknown field")
        ftype = fields[key].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            if not isinstance(value, dict):
                raise ConfigError(prefix + key, "expected an object")
            kwargs[key] = _from_dict(_resolve(ftype), value, prefix=f"{prefix}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "data": DataSection,
    "prompt": PromptSection,
    "model": ModelSection,
    "optim": OptimizerConfig,
    "beam": BeamSection,
    "eval": EvalSection,
    "flags": FlagsSection,
}


def _resolve(ftype):
    if isinstance(ftype, str):
        return {
            **{t.__name__: t for t in _SECTION_TYPES.values()},
            "int": int,
            "float": float,
            "str": str,
            "bool": bool,
        }.get(ftype, str)
    return ftype


def load_config(path=None, overrides=None) -> RunConfig:
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        config = _from_dict(RunConfig, payload)
    else:
        config = RunConfig()
    for key, raw in overrides or []:
        _apply_override(config, key, raw)
    env_seed = os.environ.get("KPROMPT_SEED")
    if env_seed is not None:
        try:
            config.seed = int(env_seed)
        except ValueError:
            raise ConfigError("KPROMPT_SEED", f"not an integer: {env_seed!r}") from None
    config.validate()
    return config


def _coerce(current, raw: str, key: str):
    if isinstance(current, bool):
        lowered = raw.lower()
        if lowered in ("on", "true", "1", "yes"):
            return True
        if lowered in ("off", "false", "0", "no"):
            return False
        raise ConfigError(key, f"expected on/off, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return json.loads(raw)
    return raw


def _apply_override(config: RunConfig, key: str, raw: str) -> None:
    target = config
    parts = key.split(".")
    try:
        for part in parts[:-1]:
            target = getattr(target, part)
        current = getattr(target, parts[-1])
    except AttributeError:
        raise ConfigError(key, "unknown field") from None
    try:
        setattr(target, parts[-1], _coerce(current, raw, key))
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(key, f"cannot parse {raw!r} as {type(current).__name__}") from None


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise KpromptError(f"missing artifact {path}; run `kprompt {stage}` first")
    return path


def _load_corpus(config: RunConfig):
    data = config.data
    for name in ("interactions", "triples", "entity_names", "relation_templates", "mpp_templates"):
        if not getattr(data, name):
            raise ConfigError(f"data.{name}", "path not set")
    log = corpus.load_interactions(data.interactions, data.min_user_count, data.min_item_count)
    kg = corpus.load_kg(data.triples, data.entity_names, data.relation_templates)
    if data.item_entities:
        kg.item_entities = corpus.load_item_entity_map(data.item_entities)
    templates = load_mpp_templates(data.mpp_templates)
    return log, kg, templates


def _template_by_id(templates, template_id: int):
    for template in templates:
        if template.id == template_id:
            return template
    raise ConfigError("prompt.template_id", f"no template with id {template_id}")


def _splits_to_json(splits: corpus.SplitSet, max_history: int) -> dict:
    return {
        "max_history": max_history,
        "train": splits.train,
        "valid": {u: [list(h), t] for u, (h, t) in splits.valid.items()},
        "test": {u: [list(h), t] for u, (h, t) in splits.test.items()},
    }


def _splits_from_json(payload: dict) -> corpus.SplitSet:
    return corpus.SplitSet(
        train={u: list(v) for u, v in payload["train"].items()},
        valid={u: (list(h), t) for u, (h, t) in payload["valid"].items()},
        test={u: (list(h), t) for u, (h, t) in payload["test"].items()},
    )


def do_synth(args) -> int:
    cfg = synth.SynthConfig(
        n_users=args.n_users,
        n_items=args.n_items,
        n_attrs=args.n_attrs,
        rule=args.rule,
        noise=args.noise,
        seed=args.seed,
        seq_len=args.seq_len,
    )
    log, kg, _ = synth.generate(cfg)
    out = Path(args.out)
    synth.write_dataset(log, kg, out)
    run_config = RunConfig(seed=args.seed)
    run_config.data = DataSection(
        interactions=str(out / "interactions.tsv"),
        triples=str(out / "triples.tsv"),
        entity_names=str(out / "entity_names.tsv"),
        item_entities=str(out / "item_entities.tsv"),
        relation_templates=str(out / "relation_templates.json"),
        mpp_templates=str(out / "mpp_templates.json"),
        min_user_count=1,
        min_item_count=1,
    )
    save_config(run_config, out / "run_config.json")
    print(
        f"wrote synthetic dataset: {len(log.users)} users, "
        f"{len(kg.item_entities)} items, {len(kg.triples)} triples -> {out}"
    )
    return 0


def _stage_dir(run: Path, name: str) -> Path:
    path = run / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_config(args) -> tuple[Path, RunConfig]:
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    config_path = args.config or (run / "config.json" if (run / "config.json").exists() else None)
    if config_path is None:
        raise ConfigError("config", f"no --config given and {run / 'config.json'} does not exist")
    config = load_config(config_path, overrides=args.overrides)
    save_config(config, run / "config.json")
    return run, config


def do_ingest(args) -> int:
    run, config = _resolve_config(args)
    log, kg, templates = _load_corpus(config)
    splits = corpus.split_leave_one_out(log, config.prompt.max_history)
    vocab = pipeline.build_vocabulary(log, kg, templates)

    out = _stage_dir(run, "ingest")
    vocab.save(out / "vocab.txt")
    with open(out / "splits.json", "w", encoding="utf-8") as fh:
        json.dump(_splits_to_json(splits, config.prompt.max_history), fh, sort_keys=True)
    stats = {
        "users": len(log.users),
        "items": len(pipeline.catalog_items(log, kg)),
        "interactions": log.interaction_count(),
        "triples": len(kg.triples),
        "vocab_size": len(vocab),
    }
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    save_config(config, out / "config.json")
    print(json.dumps(stats, sort_keys=True))
    return 0


def do_compile(args) -> int:
    run, config = _resolve_config(args)
    vocab_path = _require(run / "ingest" / "vocab.txt", "ingest")
    splits_path = _require(run / "ingest" / "splits.json", "ingest")
    vocab = Vocabulary.load(vocab_path)
    with open(splits_path, encoding="utf-8") as fh:
        splits = _splits_from_json(json.load(fh))
    _, kg, templates = _load_corpus(config)
    settings = pipeline.CompileSettings(
        template=_template_by_id(templates, config.prompt.template_id),
        hops=config.prompt.hops,
        degree=config.prompt.degree,
        max_history=config.prompt.max_history,
        max_input_tokens=config.prompt.max_input_tokens,
    )
    compiled = pipeline.compile_splits(splits, kg, vocab, settings)

    out = _stage_dir(run, "compile")
    for split_name, samples in compiled.items():
        records.write_jsonl(samples, out / f"{split_name}.jsonl")
    meta = {
        "hops": settings.hops,
        "degree": settings.degree,
        "template_id": settings.template.id,
        "max_input_tokens": settings.max_input_tokens,
        "counts": {name: len(samples) for name, samples in compiled.items()},
        "max_length": max(
            (len(s.token_ids) for samples in compiled.values() for s in samples), default=0
        ),
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    save_config(config, out / "config.json")
    print(json.dumps(meta["counts"], sort_keys=True))
    return 0


def do_train(args) -> int:
    run, config = _resolve_config(args)
    train_path = _require(run / "compile" / "train.jsonl", "compile")
    vocab_path = _require(run / "ingest" / "vocab.txt", "ingest")
    vocab = Vocabulary.load(vocab_path)
    samples = records.read_jsonl(train_path)
    if not samples:
        raise KpromptError(f"{train_path} holds no training samples")
    longest = max(len(s.token_ids) for s in samples)
    if longest > config.model.max_len:
        raise ConfigError(
            "model.max_len", f"{config.model.max_len} < longest compiled sample {longest}"
        )

    model_config = ModelConfig(
        vocab_size=len(vocab), seed=config.seed, **dataclasses.asdict(config.model)
    )
    state = ModelState.initialize(model_config, config.optim)
    out = _stage_dir(run, "train")
    state, curve = train(
        state,
        samples,
        config.optim,
        use_tree_mask=config.flags.mask,
        mask_cross=config.flags.mask_cross,
        checkpoint_path=out / "checkpoint.bin",
        curve_path=out / "loss_curve.csv",
        threads=config.threads,
    )
    save_checkpoint(state, out / "checkpoint.bin")
    save_config(config, out / "config.json")
    final = curve[-1] if curve else float("nan")
    print(f"trained {config.optim.epochs} epochs on {len(samples)} samples; final loss {final:.4f}")
    return 0


def do_eval(args) -> int:
    run, config = _resolve_config(args)
    checkpoint_path = _require(run / "train" / "checkpoint.bin", "train")
    split_path = _require(run / "compile" / f"{args.split}.jsonl", "compile")
    vocab_path = _require(run / "ingest" / "vocab.txt", "ingest")
    vocab = Vocabulary.load(vocab_path)
    state = load_checkpoint(checkpoint_path)
    samples = records.read_jsonl(split_path)
    beam_cfg = BeamConfig(
        beam_width=config.beam.beam_width,
        k=config.beam.k,
        max_target_len=config.beam.max_target_len,
    )
    out = _stage_dir(run, "eval")
    report = evaluation.evaluate_split(
        state,
        samples,
        beam_cfg,
        vocab,
        ks=tuple(config.eval.ks),
        use_tree_mask=config.flags.mask,
        mask_cross=config.flags.mask_cross,
        exclude_seen=config.flags.exclude_seen,
        fingerprint={
            "hops": config.prompt.hops,
            "degree": config.prompt.degree,
            "template_id": config.prompt.template_id,
            "seed": config.seed,
            "mask": config.flags.mask,
            "split": args.split,
        },
        topk_path=out / "topk.jsonl",
    )
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    save_config(config, out / "config.json")
    print(report.to_json())
    return 0


def _parse_sweep(expr: str) -> tuple[str, list[int]]:
    if "=" not in expr:
        raise ConfigError("sweep", f"expected field=values, got {expr!r}")
    name, _, values = expr.partition("=")
    name = name.strip()
    if name not in ("hops", "degree"):
        raise ConfigError("sweep", f"can sweep hops or degree, not {name!r}")
    values = values.strip()
    try:
        if ".." in values:
            lo, hi = values.split("..")
            parsed = list(range(int(lo), int(hi) + 1))
        else:
            parsed = [int(v) for v in values.split(",") if v]
    except ValueError:
        raise ConfigError("sweep", f"cannot parse values {values!r}") from None
    if not parsed:
        raise ConfigError("sweep", "no values given")
    return name, parsed


def do_ablate(args) -> int:
    run, config = _resolve_config(args)
    field_name, values = _parse_sweep(args.sweep)
    mask_options = {"on": [True], "off": [False], "both": [True, False]}[args.mask]

    _require(run / "ingest" / "vocab.txt", "ingest")
    out = _stage_dir(run, "ablate")
    cells_dir = _stage_dir(out, "cells")
    ks = list(config.eval.ks)
    header = ["hops", "degree", "mask", "seed", "template_id", "users"]
    header += [f"HR@{k}" for k in ks] + [f"NDCG@{k}" for k in ks]
    rows = []
    for value in values:
        for mask_on in mask_options:
            cell = f"{field_name}{value}_mask{'on' if mask_on else 'off'}"
            cell_dir = cells_dir / cell
            cell_dir.mkdir(parents=True, exist_ok=True)
            cell_config = load_config(run / "config.json")
            setattr(cell_config.prompt, field_name, value)
            cell_config.flags.mask = mask_on
            cell_config.validate()
            # The cell run shares the parent's ingest artifacts.
            save_config(cell_config, cell_dir / "config.json")
            _link_ingest(run, cell_dir)
            ns = argparse.Namespace(run=str(cell_dir), config=None, overrides=[])
            do_compile(ns)
            do_train(ns)
            eval_ns = argparse.Namespace(
                run=str(cell_dir), config=None, overrides=[], split="test"
            )
            do_eval(eval_ns)
            with open(cell_dir / "eval" / "metrics.json", encoding="utf-8") as fh:
                report = evaluation.MetricsReport.from_json(fh.read())
            row = [
                cell_config.prompt.hops,
                cell_config.prompt.degree,
                "on" if mask_on else "off",
                cell_config.seed,
                cell_config.prompt.template_id,
                report.user_count,
            ]
            row += [report.metrics[f"HR@{k}"] for k in ks]
            row += [report.metrics[f"NDCG@{k}"] for k in ks]
            rows.append(row)

    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"wrote {len(rows)} cells -> {csv_path}")
    return 0


def _link_ingest(run: Path, cell_dir: Path) -> None:
    src = run / "ingest"
    dst = cell_dir / "ingest"
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--run", required=True, help="run directory for stage artifacts")
    parser.add_argument("--config", default=None, help="run config JSON (defaults to <run>/config.json)")


_SHORTCUTS = {
    "--hops": "prompt.hops",
    "--degree": "prompt.degree",
    "--template-id": "prompt.template_id",
    "--max-history": "prompt.max_history",
    "--max-input-tokens": "prompt.max_input_tokens",
    "--epochs": "optim.epochs",
    "--batch-size": "optim.batch_size",
    "--peak-lr": "optim.peak_lr",
    "--seed": "seed",
    "--threads": "threads",
    "--beam-width": "beam.beam_width",
    "--k": "beam.k",
    "--mask-attn": "flags.mask",
    "--exclude-seen": "flags.exclude_seen",
    "--mask-cross": "flags.mask_cross",
}


def _extract_overrides(extras: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(extras):
        key = extras[i]
        if not key.startswith("--"):
            raise ConfigError("overrides", f"unexpected argument {key!r}")
        if "=" in key:
            key, _, value = key.partition("=")
            i += 1
        else:
            if i + 1 >= len(extras):
                raise ConfigError(key, "missing value")
            value = extras[i + 1]
            i += 2
        dotted = _SHORTCUTS.get(key, key[2:])
        overrides.append((dotted, value))
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kprompt",
        description="Compile knowledge prompts and train/evaluate the toy recommender.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset with planted rules")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--rule", choices=synth.RULES, default=synth.RULE_SHARED_ATTR)
    p_synth.add_argument("--n-users", type=int, default=128)
    p_synth.add_argument("--n-items", type=int, default=200)
    p_synth.add_argument("--n-attrs", type=int, default=20)
    p_synth.add_argument("--noise", type=float, default=0.2)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--seq-len", type=int, default=8)

    for name, help_text in (
        ("ingest", "load, filter, split, and build the vocabulary"),
        ("compile", "compile prompts, trees, and masks to JSONL records"),
        ("train", "train the toy transformer on compiled records"),
        ("eval", "rank targets over the catalog and report HR/NDCG"),
        ("ablate", "sweep hops or degree (x mask on/off) and emit a CSV"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "eval":
            p.add_argument("--split", choices=("valid", "test"), default="test")
        if name == "ablate":
            p.add_argument("--sweep", required=True, help="hops=0..3 or degree=2,4,6,8")
            p.add_argument("--mask", choices=("on", "off", "both"), default="on")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        if args.command != "synth":
            args.overrides = _extract_overrides(extras)
        elif extras:
            raise ConfigError("overrides", f"unexpected arguments {extras!r}")
        if args.command == "synth":
            env_seed = os.environ.get("KPROMPT_SEED")
            if env_seed is not None:
                try:
                    args.seed = int(env_seed)
                except ValueError:
                    raise ConfigError("KPROMPT_SEED", f"not an integer: {env_seed!r}") from None
            return do_synth(args)
        if args.command == "ingest":
            return do_ingest(args)
        if args.command == "compile":
            return do_compile(args)
        if args.command == "train":
            return do_train(args)
        if args.command == "eval":
            return do_eval(args)
        if args.command == "ablate":
            return do_ablate(args)
        raise KpromptError(f"unknown command {args.command!r}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except KpromptError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
