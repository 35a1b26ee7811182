"""Command-line entry points wiring the modules into reproducible experiments."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import verify
from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    load_checkpoint,
    restore_params,
    save_checkpoint,
)
from .data import ConfigError, CorpusFormatError
from .evaluate import DEFAULT_WORST_K, decode_corpus, evaluate
from .model import AdaptationPlan, ModelConfig, apply_plan, build_model
from .objective import ObjectiveConfig
from .train import TrainConfig, pretrain_upstream, train

log = logging.getLogger(__name__)

BASE_STRATEGIES = ("frozen", "finetune-window", "lora")
MODIFIERS = ("with-lidctc", "with-augmentation")

DEFAULT_EXPERIMENT = {
    "data_dir": None,
    "out_dir": None,
    "strategy": "frozen",
    "seed": 0,
    "beta": 0.3,
    "window": [3, 4],
    "lid_layers": [4],
    "lora": {"rank": 16, "alpha": 16.0},
    "model": {},
    "train": {},
    "augment": None,
    "pretrain": None,
    "init_upstream": None,
}

_SPLIT_NAMES = {
    "train": datamod.TRAIN,
    "dev-standard": datamod.DEV_STANDARD,
    "dev-dialect": datamod.DEV_DIALECT,
}


def _load_experiment(path, args):
    resolved = dict(DEFAULT_EXPERIMENT)
    if path:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(doc) - set(DEFAULT_EXPERIMENT)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        resolved.update(doc)
    # flags override config-file values, last wins
    for flag in ("strategy", "seed", "beta", "out"):
        value = getattr(args, flag.replace("-", "_"), None)
        if value is not None:
            resolved["out_dir" if flag == "out" else flag] = value
    if getattr(args, "data", None) is not None:
        resolved["data_dir"] = args.data
    if resolved["data_dir"] is None:
        raise ConfigError("missing field data_dir (or --data)")
    return resolved


def _parse_strategy(text):
    parts = [p for p in text.replace(",", "+").split("+") if p]
    bases = [p for p in parts if p in BASE_STRATEGIES]
    modifiers = [p for p in parts if p in MODIFIERS]
    unknown = [p for p in parts if p not in BASE_STRATEGIES + MODIFIERS]
    if unknown:
        raise ConfigError(
            f"unknown strategy parts {unknown}; bases are {BASE_STRATEGIES}, "
            f"modifiers are {MODIFIERS}"
        )
    if len(bases) != 1:
        raise ConfigError(f"strategy needs exactly one of {BASE_STRATEGIES}")
    return bases[0], set(modifiers)


def _build_plan(base, resolved):
    if base == "frozen":
        return AdaptationPlan.frozen()
    if base == "finetune-window":
        low, high = resolved["window"]
        return AdaptationPlan.finetune_window(low, high)
    lora = resolved["lora"]
    return AdaptationPlan.low_rank(rank=lora["rank"], alpha=lora["alpha"])


def _model_config(resolved):
    return ModelConfig(**resolved["model"])


def _train_config(resolved, plan, objective, overrides=None):
    doc = dict(resolved["train"])
    if overrides:
        doc.update(overrides)
    unknown = set(doc) - {
        "epochs", "steps_per_epoch", "batch_size", "accumulation_every",
        "peak_lr", "warmup_steps", "time_masks", "feature_masks",
    }
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    if "time_masks" in doc:
        doc["time_masks"] = tuple(doc["time_masks"])
    if "feature_masks" in doc:
        doc["feature_masks"] = tuple(doc["feature_masks"])
    return TrainConfig(
        seed=int(resolved["seed"]), plan=plan, objective=objective, **doc
    )


def _check_dims(resolved, bundle):
    mcfg = _model_config(resolved)
    if mcfg.dim != bundle.config.feature_dim:
        raise ConfigError(
            f"model.dim={mcfg.dim} does not match corpus "
            f"feature_dim={bundle.config.feature_dim}"
        )
    return mcfg


def _write_run_outputs(out_dir, resolved, result, ckpt_name):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / ckpt_name, result.best)
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _few_shot_codes(bundle):
    return sorted(
        code for code, info in bundle.tiers.items()
        if info["tier"] == datamod.TIER_FEW_SHOT
    )


def _filter_corpus(corpus, languages):
    keep = [u for u in corpus.utterances if u.language in set(languages)]
    return datamod.Corpus(keep, corpus.split)


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args):
    cfg = datamod.GenerationConfig.from_json(
        Path(args.config).read_text(encoding="utf-8")
    )
    bundle = datamod.generate_corpus(cfg, seed=args.seed)
    datamod.save_dataset(bundle, args.out)
    for name, corpus in sorted(bundle.corpora.items()):
        print(f"{name}: {len(corpus)} utterances, "
              f"{len(corpus.languages())} languages")
    print(f"vocabulary: {len(bundle.vocabulary)} tokens "
          f"({len(bundle.vocabulary.language_codes)} language codes)")
    print(f"wrote {args.out}")
    return 0


def cmd_pretrain(args):
    resolved = _load_experiment(args.config, args)
    if not resolved.get("pretrain"):
        raise ConfigError("missing field pretrain (languages subset)")
    if resolved["out_dir"] is None:
        raise ConfigError("missing field out_dir (or --out)")
    bundle = datamod.load_dataset(resolved["data_dir"])
    mcfg = _check_dims(resolved, bundle)
    block = resolved["pretrain"]
    languages = block.get("languages")
    if not languages:
        raise ConfigError("pretrain.languages must list the subset to use")
    few_shot = _few_shot_codes(bundle)
    train_corpus = _filter_corpus(bundle.corpora[datamod.TRAIN], languages)
    val_corpus = _filter_corpus(bundle.corpora[datamod.DEV_STANDARD], languages)
    if not train_corpus.utterances or not val_corpus.utterances:
        raise ConfigError(f"pretrain.languages {languages} match no utterances")
    model = build_model(mcfg, len(bundle.vocabulary), seed=int(resolved["seed"]))
    # pretraining trains the whole upstream, which excludes warm-up
    overrides = dict(block.get("train") or {})
    overrides.setdefault("warmup_steps", 0)
    config = _train_config(
        resolved, plan=None, objective=ObjectiveConfig(), overrides=overrides
    )
    result = pretrain_upstream(
        model, train_corpus, val_corpus, bundle.vocabulary, config,
        few_shot_codes=few_shot,
    )
    _write_run_outputs(resolved["out_dir"], resolved, result, "upstream.ckpt")
    for record in result.log:
        print(json.dumps(record, sort_keys=True))
    if result.diverged:
        print(f"error: diverged: {result.diverged}", file=sys.stderr)
        return 1
    print(f"best val {result.best.val_loss:.4f} at update {result.best.step}")
    return 0


def cmd_train(args):
    resolved = _load_experiment(args.config, args)
    if resolved["out_dir"] is None:
        raise ConfigError("missing field out_dir (or --out)")
    base, modifiers = _parse_strategy(resolved["strategy"])
    bundle = datamod.load_dataset(resolved["data_dir"])
    mcfg = _check_dims(resolved, bundle)
    plan = _build_plan(base, resolved)
    if "with-lidctc" in modifiers:
        objective = ObjectiveConfig(
            beta=float(resolved["beta"]),
            lid_layers=tuple(resolved["lid_layers"]),
        )
    else:
        objective = ObjectiveConfig()

    train_corpus = bundle.corpora[datamod.TRAIN]
    if "with-augmentation" in modifiers:
        block = resolved.get("augment") or {}
        emission = datamod.EmissionModel(bundle.config)
        if block.get("counts"):
            counts = {code: int(n) for code, n in block["counts"].items()}
        elif block.get("mean"):
            counts = datamod.sample_augment_counts(
                block.get("languages") or _few_shot_codes(bundle),
                block["mean"],
                int(block.get("seed", resolved["seed"])),
                spread=block.get("spread", 0.2),
            )
        else:
            raise ConfigError("augment block needs counts or mean")
        train_corpus = datamod.augment_corpus(
            train_corpus, emission, counts,
            seed=int(block.get("seed", resolved["seed"])),
        )

    model = build_model(mcfg, len(bundle.vocabulary), seed=int(resolved["seed"]))
    if resolved.get("init_upstream"):
        ckpt = load_checkpoint(resolved["init_upstream"])
        restore_params(model.named_params(), ckpt, prefix="upstream.")

    config = _train_config(resolved, plan=plan, objective=objective)
    result = train(
        model, train_corpus, bundle.corpora[datamod.DEV_STANDARD],
        bundle.vocabulary, config,
    )
    _write_run_outputs(resolved["out_dir"], resolved, result, "best.ckpt")
    for record in result.log:
        print(json.dumps(record, sort_keys=True))
    if result.diverged:
        print(f"error: diverged: {result.diverged}", file=sys.stderr)
        return 1
    print(f"best val {result.best.val_loss:.4f} at update {result.best.step}")
    return 0


def _restore_model(args):
    config_path = args.config
    if config_path is None:
        sibling = Path(args.checkpoint).parent / "resolved_config.json"
        if not sibling.exists():
            raise ConfigError(
                "no --config given and no resolved_config.json next to the "
                "checkpoint"
            )
        config_path = sibling
    resolved = _load_experiment(config_path, args)
    bundle = datamod.load_dataset(resolved["data_dir"])
    mcfg = _check_dims(resolved, bundle)
    base, _ = _parse_strategy(resolved["strategy"])
    model = build_model(mcfg, len(bundle.vocabulary), seed=int(resolved["seed"]))
    apply_plan(model, _build_plan(base, resolved))
    ckpt = load_checkpoint(args.checkpoint)
    restore_params(model.named_params(), ckpt, strict=True)
    return model, bundle


def cmd_eval(args):
    model, bundle = _restore_model(args)
    split = _SPLIT_NAMES[args.split]
    if split not in bundle.corpora:
        raise ConfigError(f"dataset has no {split} split")
    report = evaluate(
        model, bundle.corpora[split], bundle.vocabulary,
        worst_k=args.worst_k, few_shot=_few_shot_codes(bundle),
    )
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    if args.tsv:
        Path(args.tsv).write_text(report.to_tsv(), encoding="utf-8")
        print(f"wrote {args.tsv}")
    return 0


def cmd_decode(args):
    model, bundle = _restore_model(args)
    split = _SPLIT_NAMES[args.split]
    if split not in bundle.corpora:
        raise ConfigError(f"dataset has no {split} split")
    lines = []
    for utt, decoded in decode_corpus(model, bundle.corpora[split],
                                      bundle.vocabulary):
        tokens = bundle.vocabulary.decode(decoded)
        lines.append(f"{utt.id}\t{utt.language}\t{' '.join(tokens)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_gradcheck(args):
    ok = True
    diff, runtime = verify.ctc_oracle_suite(instances=args.instances,
                                            seed=args.seed or 0)
    passed = diff <= verify.CTC_ORACLE_TOL
    ok &= passed
    print(f"ctc-oracle max abs diff: {diff:.3e} over {args.instances} "
          f"instances in {runtime:.1f}s "
          f"[{'pass' if passed else 'FAIL'} <= {verify.CTC_ORACLE_TOL:.0e}]")
    results = verify.gradient_suite(seeds=args.fd_seeds, seed0=args.seed or 0)
    for name, err in results.items():
        passed = err <= verify.GRADIENT_TOL
        ok &= passed
        print(f"finite-diff {name}: max rel err {err:.3e} "
              f"[{'pass' if passed else 'FAIL'} <= {verify.GRADIENT_TOL:.0e}]")
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mladapt",
        description="Multilingual CTC adaptation experiments on synthetic "
                    "corpora",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", required=True, help="generation config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    for name, func in (("pretrain", cmd_pretrain), ("train", cmd_train)):
        p = sub.add_parser(name, help=f"{name} on a generated corpus")
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--data", help="dataset directory (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--strategy", default=None,
                       help="frozen | finetune-window | lora, plus "
                            "+with-lidctc / +with-augmentation")
        p.add_argument("--beta", type=float, default=None)
        p.set_defaults(func=func)

    for name, func in (("eval", cmd_eval), ("decode", cmd_decode)):
        p = sub.add_parser(name, help=f"{name} a trained checkpoint")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="dataset directory (overrides config)")
        p.add_argument("--config", help="experiment config JSON; defaults to "
                                        "resolved_config.json beside the checkpoint")
        p.add_argument("--split", default="dev-standard",
                       choices=sorted(_SPLIT_NAMES))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if name == "eval":
            p.add_argument("--tsv", default=None)
            p.add_argument("--worst-k", type=int, default=DEFAULT_WORST_K)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="run finite-difference and "
                                         "CTC-oracle verification suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--fd-seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusFormatError, CheckpointFormatError,
            ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
