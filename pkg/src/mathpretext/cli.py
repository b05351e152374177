"""Command-line orchestration binding all modules into reproducible runs.

Subcommands: prepare, selfsup, finetune, eval, permtest, difficulty,
ablate-tokens, embed, plot, report. A flat key=value config file may supply
any flag's default; explicit flags win. All paths resolve under --workdir.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import answer_scoring, corpus, evaluation, reports, training
from .encoder import ModelBundle, load_checkpoint, preset_config
from .tokenizer import SubwordTokenizer, Vocab, WhitespaceTokenizer

logger = logging.getLogger(__name__)

CACHE_ENV = "MATHPRETEXT_CACHE"

SUBCOMMANDS = (
    "prepare",
    "selfsup",
    "finetune",
    "eval",
    "permtest",
    "difficulty",
    "ablate-tokens",
    "embed",
    "plot",
    "report",
)


@dataclass
class ExperimentConfig:
    """Everything a run needs; serialized verbatim into its output directory."""

    command: str
    data: str | None = None
    out: str = "out"
    workdir: str = "."
    seed: int = 0
    preset: str = "toy"
    tokenizer_backend: str = "whitespace"
    vocab_file: str | None = None
    losses: str = "MLM"
    scheme: str = "ORIG"
    val_split: str = "dev"
    epochs: int | None = None
    lr: float | None = None
    batch_size: int = 16
    patience: int | None = None
    checkpoint: str | None = None
    dump: str | None = None
    fold: str = "test"
    fractions: str = "0.2,0.4,0.6,0.8,1.0"
    ext_dev_size: int = 5000
    keep_in_train: bool = False
    limit: int | None = None
    projection: str = "tsne"
    extra: dict = field(default_factory=dict)

    def resolve(self, name: str) -> Path:
        return (Path(self.workdir) / name).resolve()

    def hash(self) -> str:
        return reports.config_hash(asdict(self))


def read_flat_config(path: str | Path) -> dict:
    """Parse a flat key=value file; '#' starts a comment."""
    values = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mathpretext", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_required=False):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--workdir", default=".")
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--data", required=data_required, help="directory with train/dev/test JSONL")
        p.add_argument("--tokenizer-backend", choices=("whitespace", "subword"), default="whitespace")
        p.add_argument("--vocab-file", default=None)

    p = sub.add_parser("prepare", help="build splits and dataset statistics")
    common(p, data_required=True)
    p.add_argument("--ext-dev-size", type=int, default=5000)
    p.add_argument("--keep-in-train", action="store_true")

    p = sub.add_parser("selfsup", help="self-supervised pretext training")
    common(p, data_required=True)
    p.add_argument("--losses", default="MLM", help="comma list from MLM,ROP,NROP,QRA")
    p.add_argument("--preset", choices=("toy", "base"), default="toy")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--checkpoint", default=None, help="warm-start checkpoint directory")
    p.add_argument("--no-rationales", action="store_true", help="questions-only masking")

    p = sub.add_parser("finetune", help="fine-tune on the answer task")
    common(p, data_required=True)
    p.add_argument("--checkpoint", default=None, help="self-supervised checkpoint to start from")
    p.add_argument("--preset", choices=("toy", "base"), default="toy")
    p.add_argument("--scheme", choices=answer_scoring.SCHEMES, default="ORIG")
    p.add_argument("--val-split", choices=("dev", "extdev"), default="dev")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--track-test", action="store_true", help="record test accuracy per epoch")

    p = sub.add_parser("eval", help="score a fold and write the prediction dump")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", choices=answer_scoring.SCHEMES, default="ORIG")
    p.add_argument("--fold", default="test")

    p = sub.add_parser("permtest", help="permutation consistency test")
    common(p)
    p.add_argument("--dump", default=None, help="prediction dump over perm variants")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scheme", choices=answer_scoring.SCHEMES, default="ORIG")
    p.add_argument("--fold", default="test")

    p = sub.add_parser("difficulty", help="difficulty ranks from a prediction dump")
    common(p)
    p.add_argument("--dump", required=True)

    p = sub.add_parser("ablate-tokens", help="token-matched questions vs +rationales subsets")
    common(p, data_required=True)
    p.add_argument("--fractions", default="0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--train", action="store_true", help="also train/evaluate each paired subset (slow)")
    p.add_argument("--preset", choices=("toy", "base"), default="toy")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--losses", default="MLM,NROP")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser("embed", help="export [CLS] embeddings + 2D projection")
    common(p, data_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", default="train")
    p.add_argument("--limit", type=int, default=2500)
    p.add_argument("--projection", choices=("tsne", "pca"), default="tsne")

    p = sub.add_parser("plot", help="render figures from CSV artifacts in a directory")
    common(p)
    p.add_argument("--indir", required=True)

    p = sub.add_parser("report", help="bundle evaluation artifacts into a report")
    common(p)
    p.add_argument("--accuracy-dumps", nargs="*", default=[], help="label=dump.jsonl pairs")
    p.add_argument("--consistency-dumps", nargs="*", default=[], help="label=dump.jsonl pairs")
    p.add_argument("--metrics", default=None, help="metrics.jsonl training stream")

    parser.command_defaults = {
        name: {action.dest: action.default for action in subparser._actions}
        for name, subparser in sub.choices.items()
    }
    return parser


def _apply_flat_config(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Flat-file values fill only flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return
    values = read_flat_config(args.config)
    for key, value in values.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            logger.warning("config key %r does not match any flag; ignored", key)
            continue
        if attr in parser_defaults and getattr(args, attr) != parser_defaults[attr]:
            continue  # explicit flag wins
        current = getattr(args, attr)
        if isinstance(current, bool) or (current is None and value.lower() in ("true", "false")):
            parsed = value.lower() == "true"
        elif isinstance(current, int) and not isinstance(current, bool):
            parsed = int(value)
        elif isinstance(current, float):
            parsed = float(value)
        else:
            parsed = value
        setattr(args, attr, parsed)


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    known = {f.name for f in ExperimentConfig.__dataclass_fields__.values()}
    payload = {}
    extra = {}
    for key, value in vars(args).items():
        if key in ("config", "log_level"):
            continue
        target = key.replace("-", "_")
        if target in known:
            payload[target] = value
        else:
            extra[target] = value
    payload["extra"] = {k: v for k, v in sorted(extra.items())}
    return ExperimentConfig(**payload)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.resolve(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(reports.canonical_json(asdict(cfg)), encoding="utf-8")
    return out


def _load_tokenizer(cfg: ExperimentConfig, problems=None):
    if cfg.tokenizer_backend == "subword":
        if not cfg.vocab_file:
            raise ValueError("subword backend needs --vocab-file")
        return SubwordTokenizer.from_vocab_file(cfg.resolve(cfg.vocab_file))
    if cfg.vocab_file:
        return WhitespaceTokenizer(Vocab.load(cfg.resolve(cfg.vocab_file)))
    if problems is None:
        raise ValueError("whitespace backend needs --vocab-file or corpus data")
    texts = [t for p in problems for t in (p.question, p.rationale, *p.option_values())]
    return WhitespaceTokenizer.from_corpus(texts)


def _load_folds(cfg: ExperimentConfig) -> dict[str, list[corpus.Problem]]:
    data_dir = cfg.resolve(cfg.data)
    names = ("train", "dev", "ext_dev", "test")
    folds = {}
    for name in names:
        for suffix in (".jsonl", ".json"):
            path = data_dir / f"{name}{suffix}"
            if path.exists():
                folds[name] = corpus.load_fold(path, name)
                break
    if not folds:
        raise FileNotFoundError(f"no fold files under {data_dir}")
    return folds


def _fold(folds: dict, name: str) -> list[corpus.Problem]:
    key = "ext_dev" if name in ("extdev", "ext_dev") else name
    if key not in folds:
        raise FileNotFoundError(f"fold {name!r} not found; have {sorted(folds)}")
    return folds[key]


def _train_config(cfg: ExperimentConfig, phase: str, **overrides) -> training.TrainConfig:
    losses = tuple(x.strip().upper() for x in cfg.losses.split(",") if x.strip())
    params = dict(
        phase=phase,
        losses=losses,
        scheme=cfg.scheme,
        lr=cfg.lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        patience=cfg.patience,
        seed=cfg.seed,
        val_split=cfg.val_split,
    )
    params.update(overrides)
    return training.TrainConfig(**params)


# --- command implementations ----------------------------------------------------


def cmd_prepare(cfg: ExperimentConfig) -> int:
    folds = corpus.load_dataset(cfg.resolve(cfg.data))
    splits = corpus.build_splits(
        folds["train"],
        folds["dev"],
        folds["test"],
        seed=cfg.seed,
        ext_dev_size=cfg.ext_dev_size,
        keep_in_train=cfg.keep_in_train,
    )
    out = _out_dir(cfg)
    corpus.save_splits(splits, out)
    stats = {
        "counts": {name: len(splits.fold(name)) for name in ("train", "dev", "ext_dev", "test")},
        "answer_distribution": {
            name: corpus.answer_distribution(splits.fold(name))
            for name in ("train", "dev", "ext_dev", "test")
        },
    }
    reports.write_json(out / "stats.json", stats)
    headers = ["fold", *corpus.LABELS]
    rows = [
        [name] + [f"{stats['answer_distribution'][name][l]:.2f}%" for l in corpus.LABELS]
        for name in ("train", "dev", "ext_dev", "test")
    ]
    (out / "stats.md").write_text(reports.markdown_table(headers, rows), encoding="utf-8")
    print(f"splits + stats written to {out}")
    return 0


def cmd_selfsup(cfg: ExperimentConfig, no_rationales: bool = False) -> int:
    folds = _load_folds(cfg)
    train_problems = folds["train"]
    tokenizer = _load_tokenizer(cfg, train_problems)
    out = _out_dir(cfg)
    tokenizer.vocab.save(out / "vocab.txt")
    if cfg.checkpoint:
        bundle = load_checkpoint(cfg.resolve(cfg.checkpoint))
    else:
        import torch

        torch.manual_seed(cfg.seed)
        heads = ["mlm", "order"]
        losses = {x.strip().upper() for x in cfg.losses.split(",")}
        if "QRA" in losses:
            heads.append("qra")
        bundle = ModelBundle(preset_config(cfg.preset, len(tokenizer.vocab)), heads=heads)
    config = _train_config(cfg, training.PHASE_SELFSUP, use_rationales=not no_rationales)
    result = training.self_supervised_train(bundle, train_problems, tokenizer, config, out_dir=out)
    reports.write_report(
        out / "report",
        {"curves": result.history},
        {"config_hash": cfg.hash(), "seed": cfg.seed, "corpus_hash": corpus.corpus_fingerprint(train_problems)},
    )
    print(f"self-supervised checkpoint at {result.checkpoint_dir}")
    return 0


def cmd_finetune(cfg: ExperimentConfig, track_test: bool = False) -> int:
    folds = _load_folds(cfg)
    tokenizer = _load_tokenizer(cfg, folds["train"])
    out = _out_dir(cfg)
    if cfg.checkpoint:
        bundle = load_checkpoint(cfg.resolve(cfg.checkpoint))
    else:
        import torch

        torch.manual_seed(cfg.seed)
        bundle = ModelBundle(preset_config(cfg.preset, len(tokenizer.vocab)), heads=["mlm", "order"])
    config = _train_config(cfg, training.PHASE_FINETUNE)
    val = _fold(folds, cfg.val_split)
    result = training.finetune(
        bundle,
        folds["train"],
        val,
        tokenizer,
        config,
        out_dir=out,
        test_problems=folds.get("test") if track_test else None,
    )
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_acc": result.best_val_acc,
        "scheme": cfg.scheme,
    }
    if track_test and len(result.history) >= 3:
        pairs = [(row["val_acc"], row["test_acc"]) for row in result.history]
        try:
            summary["dev_test_correlation"] = evaluation.dev_test_correlation(pairs)
        except ValueError as err:
            summary["dev_test_correlation"] = None
            logger.warning("correlation unavailable: %s", err)
    reports.write_json(out / "summary.json", summary)
    results = {"curves": result.history}
    if track_test:
        results["scatter"] = [[row["val_acc"], row["test_acc"]] for row in result.history]
    reports.write_report(
        out / "report",
        results,
        {"config_hash": cfg.hash(), "seed": cfg.seed},
    )
    print(f"fine-tuned checkpoint at {result.checkpoint_dir} (best epoch {result.best_epoch})")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    folds = _load_folds(cfg)
    fold = _fold(folds, cfg.fold)
    tokenizer = _load_tokenizer(cfg, folds.get("train", fold))
    bundle = load_checkpoint(cfg.resolve(cfg.checkpoint))
    out = _out_dir(cfg)
    scored = answer_scoring.score_problems(bundle, fold, cfg.scheme, tokenizer)
    rows = answer_scoring.prediction_rows(fold, scored)
    dump_path = out / f"predictions_{cfg.fold}.jsonl"
    answer_scoring.write_predictions(dump_path, rows)
    acc = evaluation.accuracy(rows, fold)
    reports.write_json(out / "accuracy.json", {"fold": cfg.fold, "scheme": cfg.scheme, "accuracy": acc})
    print(f"{cfg.scheme} accuracy on {cfg.fold}: {100 * acc:.2f}% ({dump_path})")
    return 0


def cmd_permtest(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    if cfg.dump:
        rows = answer_scoring.read_predictions(cfg.resolve(cfg.dump))
        report = evaluation.consistency_from_dump(rows)
    else:
        if not cfg.checkpoint or not cfg.data:
            raise ValueError("permtest needs --dump or both --checkpoint and --data")
        folds = _load_folds(cfg)
        fold = _fold(folds, cfg.fold)
        tokenizer = _load_tokenizer(cfg, folds.get("train", fold))
        bundle = load_checkpoint(cfg.resolve(cfg.checkpoint))
        report, rows = evaluation.evaluate_consistency(bundle, fold, cfg.scheme, tokenizer)
        answer_scoring.write_predictions(out / "perm_predictions.jsonl", rows)
    payload = {
        "score": report.score,
        "n_problems": report.n_problems,
        "rows": report.rows,
    }
    reports.write_json(out / "consistency.json", payload)
    (out / "consistency.md").write_text(
        reports.markdown_table(
            ["problems", "all-5-correct", "score"],
            [[report.n_problems, sum(r["all_correct"] for r in report.rows), f"{100 * report.score:.3f}%"]],
        ),
        encoding="utf-8",
    )
    print(f"permutation consistency: {100 * report.score:.3f}% over {report.n_problems} problems")
    return 0


def cmd_difficulty(cfg: ExperimentConfig) -> int:
    rows = answer_scoring.read_predictions(cfg.resolve(cfg.dump))
    report = evaluation.difficulty_report(rows)
    out = _out_dir(cfg)
    payload = {
        "histogram": {f"D{d}": report.histogram[d] for d in sorted(report.histogram)},
        "groups": report.groups,
        "n_problems": report.n_problems,
    }
    reports.write_json(out / "difficulty.json", payload)
    reports.write_csv(
        out / "difficulty.csv",
        ["rank", "count"],
        [[d, report.histogram[d]] for d in sorted(report.histogram)],
    )
    reports.plot_difficulty(report.histogram, out / "difficulty.png")
    print(f"difficulty histogram: {payload['histogram']} groups: {report.groups}")
    return 0


def cmd_ablate_tokens(cfg: ExperimentConfig, do_train: bool = False) -> int:
    folds = _load_folds(cfg)
    train_problems = folds["train"]
    tokenizer = _load_tokenizer(cfg, train_problems)
    fractions = [float(x) for x in cfg.fractions.split(",") if x.strip()]
    rng = np.random.default_rng(cfg.seed)
    pairs = corpus.token_matched_subsets(train_problems, tokenizer, fractions, rng=rng)
    out = _out_dir(cfg)
    ratio = corpus.rationale_question_token_ratio(train_problems, tokenizer)
    rows = []
    for pair in pairs:
        row = {
            "fraction": pair.fraction,
            "budget": pair.budget,
            "questions_size": len(pair.questions_subset),
            "joint_size": len(pair.joint_subset),
            "questions_tokens": pair.question_tokens,
            "joint_tokens": pair.joint_tokens,
            "mismatch": round(pair.mismatch, 5),
        }
        if do_train:
            row["questions_accuracy"] = _ablation_accuracy(
                cfg, pair.questions_subset, folds, tokenizer, use_rationales=False
            )
            row["joint_accuracy"] = _ablation_accuracy(
                cfg, pair.joint_subset, folds, tokenizer, use_rationales=True
            )
        rows.append(row)
    headers = list(rows[0].keys())
    reports.write_csv(out / "token_ablation.csv", headers, [[r[h] for h in headers] for r in rows])
    reports.write_json(out / "token_ablation.json", {"ratio_rationale_to_question": ratio, "rows": rows})
    reports.plot_token_ablation(rows, out / "token_ablation.png")
    print(f"token ablation over {len(rows)} budgets written to {out} (r/q token ratio {ratio:.2f})")
    return 0


def _ablation_accuracy(cfg, subset, folds, tokenizer, use_rationales: bool) -> float:
    """Train selfsup on the subset, fine-tune, and report test accuracy."""
    import torch

    torch.manual_seed(cfg.seed)
    losses = tuple(x.strip().upper() for x in cfg.losses.split(",") if x.strip())
    if not use_rationales:
        losses = tuple(l for l in losses if l == "MLM") or ("MLM",)
    bundle = ModelBundle(preset_config(cfg.preset, len(tokenizer.vocab)), heads=["mlm", "order"])
    ss_config = training.TrainConfig(
        phase=training.PHASE_SELFSUP,
        losses=losses,
        lr=cfg.lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        use_rationales=use_rationales,
    )
    training.self_supervised_train(bundle, subset, tokenizer, ss_config)
    ft_config = training.TrainConfig(
        phase=training.PHASE_FINETUNE,
        scheme="ORIG",
        epochs=max(2, (cfg.epochs or 2)),
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )
    result = training.finetune(bundle, subset, _fold(folds, cfg.val_split), tokenizer, ft_config)
    return training.accuracy_of(result.bundle, _fold(folds, "test"), "ORIG", tokenizer)


def cmd_embed(cfg: ExperimentConfig) -> int:
    folds = _load_folds(cfg)
    fold = _fold(folds, cfg.fold)
    tokenizer = _load_tokenizer(cfg, folds.get("train", fold))
    bundle = load_checkpoint(cfg.resolve(cfg.checkpoint))
    out = _out_dir(cfg)
    rng = np.random.default_rng(cfg.seed)
    matrix, labels, ids = evaluation.export_embeddings(
        bundle, fold, tokenizer, limit=cfg.limit or 2500, rng=rng
    )
    reports.write_csv(
        out / "embeddings.csv",
        ["id", "label"] + [f"d{i}" for i in range(matrix.shape[1])],
        [[ids[i], labels[i], *matrix[i].tolist()] for i in range(len(ids))],
    )
    coords = evaluation.project_2d(matrix, method=cfg.projection, seed=cfg.seed)
    reports.write_csv(
        out / "projection.csv",
        ["id", "label", "x", "y"],
        [[ids[i], labels[i], float(coords[i, 0]), float(coords[i, 1])] for i in range(len(ids))],
    )
    reports.plot_embeddings(coords, labels, out / "projection.png")
    print(f"{matrix.shape[0]} embeddings + {cfg.projection} projection written to {out}")
    return 0


def cmd_plot(cfg: ExperimentConfig, indir: str) -> int:
    """Render figures for every known CSV artifact found in a directory."""
    src = cfg.resolve(indir)
    out = _out_dir(cfg)
    rendered = []
    if (src / "difficulty.csv").exists():
        _, rows = reports.read_csv(src / "difficulty.csv")
        hist = {int(r[0]): int(r[1]) for r in rows}
        rendered.append(reports.plot_difficulty(hist, out / "difficulty.png"))
    if (src / "token_ablation.csv").exists():
        headers, rows = reports.read_csv(src / "token_ablation.csv")
        dicts = [
            {h: (float(v) if v not in ("", None) else None) for h, v in zip(headers, row)}
            for row in rows
        ]
        rendered.append(reports.plot_token_ablation(dicts, out / "token_ablation.png"))
    if (src / "dev_test_scatter.csv").exists():
        _, rows = reports.read_csv(src / "dev_test_scatter.csv")
        pairs = [[float(a), float(b)] for a, b in rows]
        rendered.append(reports.plot_scatter(pairs, out / "dev_test_scatter.png"))
    if (src / "curves.csv").exists():
        headers, rows = reports.read_csv(src / "curves.csv")
        history = []
        for row in rows:
            entry = {}
            for h, v in zip(headers, row):
                if v == "":
                    continue
                entry[h] = float(v) if h != "epoch" else int(float(v))
            history.append(entry)
        rendered.append(reports.plot_loss_curves(history, out / "curves.png"))
    if (src / "projection.csv").exists():
        _, rows = reports.read_csv(src / "projection.csv")
        coords = np.array([[float(r[2]), float(r[3])] for r in rows])
        labels = [r[1] for r in rows]
        rendered.append(reports.plot_embeddings(coords, labels, out / "projection.png"))
    if not rendered:
        raise FileNotFoundError(f"no known CSV artifacts under {src}")
    print(f"rendered {len(rendered)} figures to {out}")
    return 0


def cmd_report(cfg: ExperimentConfig, accuracy_dumps, consistency_dumps, metrics) -> int:
    out = _out_dir(cfg)
    results: dict = {}
    acc_rows = []
    for spec in accuracy_dumps:
        label, path = spec.split("=", 1)
        rows = answer_scoring.read_predictions(cfg.resolve(path))
        acc_rows.append({"model": label, "accuracy": evaluation.accuracy(rows)})
    if acc_rows:
        results["accuracy"] = acc_rows
    cons_rows = []
    for spec in consistency_dumps:
        label, path = spec.split("=", 1)
        rows = answer_scoring.read_predictions(cfg.resolve(path))
        cons_rows.append({"model": label, "score": evaluation.consistency_from_dump(rows).score})
    if cons_rows:
        results["consistency"] = cons_rows
    if metrics:
        history = []
        for line in Path(cfg.resolve(metrics)).read_text(encoding="utf-8").splitlines():
            if line.strip():
                history.append(json.loads(line))
        results["curves"] = history
        if all("val_acc" in row and "test_acc" in row for row in history) and history:
            results["scatter"] = [[row["val_acc"], row["test_acc"]] for row in history]
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed}
    artifacts = reports.write_report(out, results, meta)
    print(f"report bundle: {', '.join(str(p) for p in artifacts.values())}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            _emit_error("argument-error", "invalid or unknown arguments")
        return exc.code or 0
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO))
    try:
        defaults = dict(parser.command_defaults.get(args.command, {}))
        _apply_flat_config(args, defaults)
        cfg = _experiment_config(args)
        os.environ.setdefault(CACHE_ENV, str(Path(cfg.workdir) / ".cache"))
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "selfsup":
            return cmd_selfsup(cfg, no_rationales=args.no_rationales)
        if args.command == "finetune":
            return cmd_finetune(cfg, track_test=args.track_test)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "permtest":
            return cmd_permtest(cfg)
        if args.command == "difficulty":
            return cmd_difficulty(cfg)
        if args.command == "ablate-tokens":
            return cmd_ablate_tokens(cfg, do_train=args.train)
        if args.command == "embed":
            return cmd_embed(cfg)
        if args.command == "plot":
            return cmd_plot(cfg, args.indir)
        if args.command == "report":
            return cmd_report(cfg, args.accuracy_dumps, args.consistency_dumps, args.metrics)
        raise ValueError(f"unknown subcommand {args.command!r}")
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports all failures
        _emit_error(type(err).__name__, str(err))
        logger.debug("traceback", exc_info=True)
        return 1


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
