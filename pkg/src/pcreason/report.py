"""Report rendering: JSON + aligned-column tables + matplotlib figures.

Every evaluation writes three artifacts side by side: ``<stem>.json`` for
scripts, ``<stem>.txt`` with the per-level table, and ``<stem>.png`` with a
per-level metric bar chart. Training logs (JSONL) render to a loss-curve
figure.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalverify import EvalReport  # noqa: E402


def save_eval_outputs(report: EvalReport, out_dir, stem: str) -> dict:
    """Write report JSON, text table, and per-level metrics figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{stem}.json"
    txt_path = out / f"{stem}.txt"
    fig_path = out / f"{stem}.png"
    json_path.write_text(report.to_json())
    txt_path.write_text(report.to_table() + "\n")

    levels = sorted(report.per_level)
    metrics = ["exact_match", "bleu4", "ghr"]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2), constrained_layout=True)
    for ax, metric in zip(axes, metrics):
        values = [
            report.per_level[lv][metric] if report.per_level[lv][metric] is not None
            else 0.0
            for lv in levels
        ]
        ax.bar([f"L{lv}" for lv in levels], values, color="#4878cf")
        ax.set_title(metric)
        ax.set_ylim(0, 1.05)
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle(f"{stem} (n={report.n_records})")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"json": str(json_path), "table": str(txt_path), "figure": str(fig_path)}


def save_training_figure(log_path, fig_path) -> str:
    """Render gen/pred/anchor/total loss curves from a JSONL training log."""
    entries = [
        json.loads(line)
        for line in Path(log_path).read_text().splitlines()
        if line.strip()
    ]
    if not entries:
        raise ValueError(f"empty training log: {log_path}")
    fig, ax = plt.subplots(figsize=(7, 4), constrained_layout=True)
    base = 0
    # concatenate stages along the x axis
    xs = []
    last_stage = None
    prev_step = -1
    for e in entries:
        if e["step"] <= prev_step and last_stage is not None:
            base = xs[-1] + 1
        xs.append(base + e["step"])
        prev_step = e["step"]
        last_stage = e["stage"]
    for key, color in [
        ("total", "black"), ("gen", "#4878cf"), ("pred", "#d65f5f"),
        ("anchor", "#6acc65"),
    ]:
        series = [(x, e[key]) for x, e in zip(xs, entries) if e.get(key) is not None]
        if series:
            ax.plot(*zip(*series), label=key, color=color, linewidth=1.2)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return str(fig_path)
