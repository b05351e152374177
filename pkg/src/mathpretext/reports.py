"""Report emission: JSON for machines, Markdown tables for humans, CSV as the
plotting contract, and rendered matplotlib figures as convenience output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:12]


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8")
    return path


def write_csv(path: str | Path, headers: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(rows)
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[0], rows[1:]


def markdown_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [
        "| " + " | ".join(str(h) for h in headers) + " |",
        "| " + " | ".join("---" for _ in headers) + " |",
    ]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines) + "\n"


def accuracy_table(results: Sequence[dict]) -> tuple[list[str], list[list]]:
    """Model-comparison layout: one row per model/scheme with its accuracy."""
    headers = ["Model", "Accuracy"]
    rows = []
    for r in results:
        acc = f"{100 * r['accuracy']:.1f}%"
        if r.get("std") is not None:
            acc = f"{100 * r['accuracy']:.1f}(±{100 * r['std']:.1f})%"
        rows.append([r["model"], acc])
    return headers, rows


def consistency_table(results: Sequence[dict]) -> tuple[list[str], list[list]]:
    """Permutation-consistency layout: one row per model with its score."""
    return ["Model", "Score"], [[r["model"], f"{100 * r['score']:.2f}%"] for r in results]


def write_report(out_dir: str | Path, results: dict, meta: dict) -> dict[str, Path]:
    """Emit report.json + report.md (+ per-section CSVs and figures).

    `results` sections are optional: accuracy (list), consistency (list),
    difficulty (histogram dict), curves (history rows), scatter (val/test
    pairs). Deterministic given identical inputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}
    md_parts = [f"# Evaluation report\n\nconfig_hash: `{meta.get('config_hash', 'n/a')}`\n"]
    for key in ("seed", "corpus_hash"):
        if key in meta:
            md_parts.append(f"{key}: `{meta[key]}`\n")

    if results.get("accuracy"):
        headers, rows = accuracy_table(results["accuracy"])
        md_parts.append("\n## Accuracy\n\n" + markdown_table(headers, rows))
        artifacts["accuracy_csv"] = write_csv(
            out_dir / "accuracy.csv",
            ["model", "accuracy", "std"],
            [[r["model"], r["accuracy"], r.get("std", "")] for r in results["accuracy"]],
        )
    if results.get("consistency"):
        headers, rows = consistency_table(results["consistency"])
        md_parts.append("\n## Permutation consistency\n\n" + markdown_table(headers, rows))
        artifacts["consistency_csv"] = write_csv(
            out_dir / "consistency.csv",
            ["model", "score"],
            [[r["model"], r["score"]] for r in results["consistency"]],
        )
    if results.get("difficulty"):
        hist = results["difficulty"]
        md_parts.append(
            "\n## Difficulty\n\n"
            + markdown_table(
                ["Rank", "Count"], [[f"D{d}", hist[d]] for d in sorted(hist)]
            )
        )
        artifacts["difficulty_csv"] = write_csv(
            out_dir / "difficulty.csv", ["rank", "count"], [[d, hist[d]] for d in sorted(hist)]
        )
        artifacts["difficulty_png"] = plot_difficulty(hist, out_dir / "difficulty.png")
    if results.get("curves"):
        artifacts["curves_csv"] = write_csv(
            out_dir / "curves.csv",
            sorted({k for row in results["curves"] for k in row}),
            [
                [row.get(k, "") for k in sorted({k for r in results["curves"] for k in r})]
                for row in results["curves"]
            ],
        )
        artifacts["curves_png"] = plot_loss_curves(results["curves"], out_dir / "curves.png")
    if results.get("scatter"):
        artifacts["scatter_csv"] = write_csv(
            out_dir / "dev_test_scatter.csv", ["val_acc", "test_acc"], results["scatter"]
        )
        artifacts["scatter_png"] = plot_scatter(results["scatter"], out_dir / "dev_test_scatter.png")

    report = {"meta": meta, "results": results}
    artifacts["report_json"] = write_json(out_dir / "report.json", report)
    report_md = out_dir / "report.md"
    report_md.write_text("".join(md_parts), encoding="utf-8")
    artifacts["report_md"] = report_md
    return artifacts


# --- figures -------------------------------------------------------------------


def plot_loss_curves(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [row["epoch"] for row in history]
    for key in sorted({k for row in history for k in row if k.startswith("loss")}):
        ys = [row.get(key) for row in history]
        ax.plot(epochs, ys, marker="o", markersize=3, label=key)
    if any("val_acc" in row for row in history):
        ax2 = ax.twinx()
        ax2.plot(
            epochs,
            [row.get("val_acc") for row in history],
            color="tab:green",
            linestyle="--",
            label="val_acc",
        )
        ax2.set_ylabel("validation accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_scatter(pairs: Sequence[Sequence[float]], path: str | Path) -> Path:
    path = Path(path)
    val = [p[0] for p in pairs]
    test = [p[1] for p in pairs]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(val, test, s=18, alpha=0.7)
    ax.set_xlabel("validation accuracy")
    ax.set_ylabel("test accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_difficulty(histogram: dict, path: str | Path) -> Path:
    path = Path(path)
    ranks = sorted(histogram)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.bar([f"D{d}" for d in ranks], [histogram[d] for d in ranks], color="tab:blue")
    ax.set_xlabel("difficulty rank of correct answer")
    ax.set_ylabel("questions")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_token_ablation(rows: Sequence[dict], path: str | Path) -> Path:
    """Accuracy vs token budget for the paired questions-only / +rationales runs."""
    path = Path(path)
    budgets = [r["budget"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    if any("questions_accuracy" in r for r in rows):
        ax.plot(budgets, [r.get("questions_accuracy") for r in rows], marker="o", label="questions only")
        ax.plot(budgets, [r.get("joint_accuracy") for r in rows], marker="s", label="questions + rationales")
        ax.set_ylabel("accuracy")
        ax.legend()
    else:
        ax.plot(budgets, [r["questions_size"] for r in rows], marker="o", label="questions subset size")
        ax.plot(budgets, [r["joint_size"] for r in rows], marker="s", label="joint subset size")
        ax.set_ylabel("problems")
        ax.legend()
    ax.set_xlabel("token budget")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_embeddings(coords: np.ndarray, labels: Sequence[str], path: str | Path) -> Path:
    path = Path(path)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(6, 5.5))
    for label in sorted(set(labels.tolist())):
        sel = labels == label
        ax.scatter(coords[sel, 0], coords[sel, 1], s=14, alpha=0.7, label=label)
    ax.legend(title="operator")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
