"""Batch command-line pipeline: generate, train, adapt, evaluate, report.

Exit codes are a stable contract: 0 success, 2 configuration or argument
problem, 3 IO or file-format problem, 4 numerical failure.  Every
command is deterministic given --seed.  Stdout carries a human-readable
summary; machine-readable output goes to files.
"""

import argparse
import copy
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .colearn import (
    ColearnConfig,
    initialize,
    load_metrics_jsonl,
    run,
)
from .data import (
    SourceTrainConfig,
    SyntheticSpec,
    generate,
    load_dataset,
    load_truth_csv,
    save_dataset,
    save_truth_csv,
    train_source,
)
from .evaluate import (
    evaluate_model,
    report_from_json,
    report_to_json,
    save_confusion_csv,
    target_compatibility_ratio,
)
from .featurebank import load_bank, oracle_ncc_accuracy, save_bank
from .model import forward_batch, load_model, save_model
from .numerics import (
    DegenerateInputError,
    DivergenceError,
    FormatError,
    InvalidArgumentError,
)

# Standard training recipe defaults:
# 15 episodes, batch size 50, learning rate 0.01 decayed to 0.001 after
# episode 10, confidence threshold 0.5, centroid temperature 0.01.
DEFAULT_CONFIG = {
    "seed": 7,
    "data": {
        "classes": 4,
        "input_dim": 8,
        "samples_per_class_source": 100,
        "samples_per_class_target": 100,
        "separation": 4.0,
        "covariance_scale": 1.0,
        "rotation_angles": [0.9, 0.9, 0.9, 0.9],
        "translation": [0.8, -0.8],
        "scale": 1.0,
        "bank_map_dim": 16,
        "bank_hidden_dim": 24,
        "bank_informativeness": 0.8,
        "bank_class_signal": 1.5,
        "bank_noise": 0.65,
    },
    "model": {
        "hidden": [32, 32],
        "feature_dim": 16,
    },
    "source": {
        "epochs": 40,
        "lr": 0.05,
        "momentum": 0.9,
        "batch_size": 50,
        "label_smoothing": 0.0,
    },
    "colearn": {
        "scheme": "match-or-conf",
        "gamma": 0.5,
        "episodes": 15,
        "batch_size": 50,
        "lr": 0.01,
        "lr_after_decay": 0.001,
        "decay_episode": 10,
        "momentum": 0.9,
        "temperature": 0.01,
        "centroid_subset": "all",
        "centroid_iterations": 1,
        "loss_coefficient": 1.0,
        "steps_per_episode": None,
        "conf_before_sharpening": False,
    },
}


def load_config(path):
    """Merge a JSON config over the defaults, rejecting unknown keys."""
    merged = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return merged
    try:
        with open(path) as f:
            user = json.load(f)
    except OSError as e:
        raise InvalidArgumentError(f"cannot read config file {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(user, dict):
        raise InvalidArgumentError(f"config file {path} must hold a JSON object")
    for key, value in user.items():
        if key == "seed":
            merged["seed"] = value
            continue
        if key not in merged:
            raise InvalidArgumentError(f"unknown config key {key!r}")
        if not isinstance(value, dict):
            raise InvalidArgumentError(f"config section {key!r} must be an object")
        for sub, v in value.items():
            if sub == "seed" and key in ("data", "source", "colearn"):
                merged[key]["seed"] = v
                continue
            if sub not in merged[key]:
                raise InvalidArgumentError(f"unknown config key {key!r}.{sub!r}")
            merged[key][sub] = v
    return merged


def _section_seed(cfg, section, flag_seed):
    if flag_seed is not None:
        return int(flag_seed)
    return int(cfg[section].get("seed", cfg["seed"]))


def _synthetic_spec(cfg, flag_seed):
    section = dict(cfg["data"])
    section["seed"] = _section_seed(cfg, "data", flag_seed)
    section["rotation_angles"] = tuple(section["rotation_angles"])
    section["translation"] = tuple(section["translation"])
    return SyntheticSpec(**section)


def _source_cfg(cfg, flag_seed):
    section = dict(cfg["source"])
    section["seed"] = _section_seed(cfg, "source", flag_seed)
    return SourceTrainConfig(**section)


def _colearn_cfg(cfg, args):
    section = dict(cfg["colearn"])
    section["seed"] = _section_seed(cfg, "colearn", args.seed)
    overrides = {
        "scheme": args.scheme,
        "gamma": args.gamma,
        "episodes": args.episodes,
        "lr": args.lr,
        "decay_episode": args.decay_episode,
        "centroid_subset": args.centroid_subset,
        "centroid_iterations": args.centroid_iters,
        "temperature": args.temperature,
    }
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    return ColearnConfig(**section)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def _model_dims(cfg, input_dim):
    return (input_dim, *cfg["model"]["hidden"], cfg["model"]["feature_dim"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_config(args.config)
    spec = _synthetic_spec(cfg, args.seed)
    source, target, bank, truth = generate(spec)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "source": out / "source.cfds",
        "target": out / "target.cfds",
        "bank": out / "bank.cfbk",
        "truth": out / "truth.csv",
    }
    save_dataset(source, paths["source"])
    save_dataset(target, paths["target"])
    save_bank(bank, paths["bank"])
    save_truth_csv(truth, paths["truth"])

    print(f"seed={spec.seed}")
    print(f"classes={spec.classes} input_dim={spec.input_dim} "
          f"target_samples={target.n_samples} bank_dim={bank.dim}")
    for name, path in paths.items():
        print(f"wrote {path} sha256={_sha256(path)}")
    return 0


def cmd_train_source(args):
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    source = load_dataset(data_dir / "source.cfds")
    if source.labels is None:
        raise InvalidArgumentError(f"{data_dir / 'source.cfds'} carries no labels")
    train_cfg = _source_cfg(cfg, args.seed)
    dims = _model_dims(cfg, source.dim)
    model = train_source(source, dims, train_cfg)
    save_model(model, args.out)

    _, _, probs = forward_batch(model, source.inputs)
    src_acc = float(np.mean(probs.argmax(axis=1) == source.labels))
    print(f"seed={train_cfg.seed} epochs={train_cfg.epochs} dims={dims}")
    print(f"source accuracy: {src_acc:.4f}")
    target_path = data_dir / "target.cfds"
    truth_path = data_dir / "truth.csv"
    if target_path.exists() and truth_path.exists():
        target = load_dataset(target_path)
        truth = load_truth_csv(truth_path)
        _, _, tprobs = forward_batch(model, target.inputs)
        tgt_acc = float(np.mean(tprobs.argmax(axis=1) == truth))
        print(f"target accuracy: {tgt_acc:.4f}")
    print(f"wrote {args.out} sha256={_sha256(args.out)}")
    return 0


def cmd_colearn(args):
    cfg = load_config(args.config)
    colearn_cfg = _colearn_cfg(cfg, args)
    model = load_model(args.model)
    bank = load_bank(args.bank)
    target = load_dataset(args.data)
    truth = load_truth_csv(args.truth) if args.truth else None

    session = initialize(model, bank, target.inputs, colearn_cfg, truth=truth)
    with open(args.metrics, "w") as stream:
        result = run(session, metrics_stream=stream)
    save_model(result.model, args.out)

    last = result.records[-1]
    print(f"scheme={colearn_cfg.scheme} gamma={colearn_cfg.gamma} "
          f"episodes={colearn_cfg.episodes} seed={colearn_cfg.seed}")
    print(f"final pseudolabel proportion: {last.pseudolabel_proportion:.4f}")
    if truth is not None:
        print(f"final adaptation accuracy: {last.adapt_accuracy:.4f}")
        print(f"final pre-trained branch accuracy: {last.pretrained_accuracy:.4f}")
    print(f"wrote {args.metrics} sha256={_sha256(args.metrics)}")
    print(f"wrote {args.out} sha256={_sha256(args.out)}")
    return 0


def cmd_eval(args):
    model = load_model(args.model)
    target = load_dataset(args.data)
    truth = load_truth_csv(args.truth)
    report = evaluate_model(model, target.inputs, truth)
    text = report_to_json(report, args.out)
    print(text)
    if args.out:
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_oracle(args):
    if args.bank is None and args.model is None and args.model_features is None:
        raise InvalidArgumentError(
            "need --bank, --model with --data, or --model-features")
    if args.model and args.model_features:
        raise InvalidArgumentError("--model and --model-features are exclusive")
    truth = load_truth_csv(args.truth)
    bank_acc = source_acc = None
    if args.bank:
        bank = load_bank(args.bank)
        bank_acc = oracle_ncc_accuracy(bank, truth)
        print(f"bank oracle accuracy: {bank_acc:.4f}")
    if args.model:
        if args.data is None:
            raise InvalidArgumentError("--model needs --data for target inputs")
        model = load_model(args.model)
        target = load_dataset(args.data)
        feats, _, _ = forward_batch(model, target.inputs)
        source_acc = oracle_ncc_accuracy(feats, truth)
        print(f"source-feature oracle accuracy: {source_acc:.4f}")
    elif args.model_features:
        source_acc = oracle_ncc_accuracy(load_bank(args.model_features), truth)
        print(f"source-feature oracle accuracy: {source_acc:.4f}")
    if bank_acc is not None and source_acc is not None:
        ratio = source_acc / bank_acc
        print(f"target-compatibility ratio: {ratio:.4f}")
        print("pre-trained branch is more target-compatible"
              if ratio < 1.0 else
              "source features are at least as target-compatible")
    return 0


def cmd_report(args):
    from . import plots

    records = load_metrics_jsonl(args.metrics)
    if not records:
        raise InvalidArgumentError(f"no records in {args.metrics}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    curves_csv = out / "curves.csv"
    with open(curves_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "episode", "pseudolabel_proportion", "pseudolabel_accuracy",
            "adapt_accuracy", "pretrained_accuracy", "mean_loss",
        ])
        for r in records:
            d = r.to_json_dict()
            writer.writerow([
                d["episode"], d["pseudolabel_proportion"],
                d["pseudolabel_accuracy"], d["adapt_accuracy"],
                d["pretrained_accuracy"], d["mean_loss"],
            ])
    curves_png = out / "curves.png"
    plots.render_training_curves(records, curves_png)
    written = [curves_csv, curves_png]

    if args.eval:
        report = report_from_json(args.eval)
        counts = np.asarray(report["confusion"])
        save_confusion_csv(counts, out / "confusion.csv")
        plots.render_confusion(counts, out / "confusion.png")
        hist = report["confidence_histogram"]
        plots.render_confidence_histogram(
            hist["edges"], hist["correct"], hist["incorrect"],
            out / "confidence.png",
        )
        written += [out / "confusion.csv", out / "confusion.png",
                    out / "confidence.png"]
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="coadapt",
        description="Source-free domain adaptation by co-learning with a "
                    "frozen feature bank.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic adaptation problem")
    p.add_argument("--config", help="JSON run config (defaults used if omitted)")
    p.add_argument("--out-dir", required=True, help="directory for generated files")
    p.add_argument("--seed", type=int, help="override the data seed (default 7)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source model on labeled source data")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True, help="output model checkpoint (.cfmd)")
    p.add_argument("--seed", type=int, help="override the training seed (default 7)")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("colearn", help="adapt a source model by co-learning")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--model", required=True, help="source model checkpoint")
    p.add_argument("--bank", required=True, help="feature bank file (.cfbk)")
    p.add_argument("--data", required=True, help="target dataset file (.cfds)")
    p.add_argument("--metrics", required=True, help="output JSON-lines metrics file")
    p.add_argument("--out", required=True, help="output adapted model checkpoint")
    p.add_argument("--truth", help="optional truth CSV; enables accuracy in metrics")
    p.add_argument("--scheme",
                   choices=["match-or-conf", "self-conf", "other-conf",
                            "match", "match-and-conf"],
                   help="pseudolabel fusion scheme (default match-or-conf)")
    p.add_argument("--gamma", type=float,
                   help="confidence threshold (default 0.5; 0.1 suits a highly "
                        "target-compatible bank)")
    p.add_argument("--episodes", type=int, help="co-learning episodes (default 15)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    p.add_argument("--decay-episode", type=int,
                   help="episode after which the rate drops to its decayed "
                        "value (default 10)")
    p.add_argument("--centroid-subset", choices=["all", "pseudolabeled"],
                   help="samples used for centroid refresh (default all)")
    p.add_argument("--centroid-iters", type=int,
                   help="centroid refinement iterations (default 1)")
    p.add_argument("--temperature", type=float,
                   help="centroid softmax temperature (default 0.01)")
    p.add_argument("--seed", type=int, help="override the adaptation seed (default 7)")
    p.set_defaults(func=cmd_colearn)

    p = sub.add_parser("eval", help="evaluate a model on labeled target data")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="dataset file (.cfds)")
    p.add_argument("--truth", required=True, help="truth CSV")
    p.add_argument("--out", help="also write the JSON report to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="oracle target accuracy and compatibility ratio")
    p.add_argument("--bank", help="feature bank file (.cfbk)")
    p.add_argument("--model", help="model checkpoint for source-feature oracle")
    p.add_argument("--data", help="target dataset (needed with --model)")
    p.add_argument("--model-features",
                   help="bank-format file of extractor features, as an "
                        "alternative to --model/--data")
    p.add_argument("--truth", required=True, help="truth CSV")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="render figures and CSV exports from run outputs")
    p.add_argument("--metrics", required=True, help="JSON-lines metrics file")
    p.add_argument("--eval", help="JSON report from the eval command")
    p.add_argument("--out-dir", required=True, help="directory for figures and CSVs")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidArgumentError, DegenerateInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
