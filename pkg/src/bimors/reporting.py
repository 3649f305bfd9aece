"""Report emission: aligned text tables, key=value documents, and figures.

Every report path writes three artifacts side by side: a human-readable
aligned table (.txt), a machine-readable key=value document (.kv), and a
PNG figure. File names encode regime, dataset, and seed. Figures are
rendered through the Agg backend with scrubbed metadata so identical
inputs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import AblationRow, EvalReport

_SAVEFIG = dict(dpi=110, bbox_inches="tight", metadata={"Software": None})


def report_stem(report: EvalReport) -> str:
    tag = "zeroshot" if report.zero_shot else report.mode
    return f"{report.regime.lower()}_{report.dataset}_seed{report.seed}_{tag}"


def kv_text(pairs: dict) -> str:
    return "\n".join(f"{k}={v}" for k, v in pairs.items()) + "\n"


def aligned_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    def fmt(cells):
        return "  ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"


def b2n_table(reports: list[EvalReport]) -> str:
    headers = ["dataset", "seed", "mode", "base", "new", "H", "params"]
    rows = [
        [
            r.dataset, str(r.seed), "zeroshot" if r.zero_shot else r.mode,
            f"{r.base_acc:.2f}", f"{r.new_acc:.2f}", f"{r.hmean:.2f}",
            str(r.trainable_params),
        ]
        for r in reports
    ]
    if len(reports) > 1:
        rows.append([
            "mean", "-", "-",
            f"{np.mean([r.base_acc for r in reports]):.2f}",
            f"{np.mean([r.new_acc for r in reports]):.2f}",
            f"{np.mean([r.hmean for r in reports]):.2f}",
            str(reports[0].trainable_params),
        ])
    return aligned_table(headers, rows)


def transfer_table(reports: list[EvalReport]) -> str:
    headers = ["regime", "dataset", "seed", "target_acc", "n", "params"]
    rows = [
        [
            r.regime, r.dataset, str(r.seed), f"{r.target_acc:.2f}",
            str(r.n_records), str(r.trainable_params),
        ]
        for r in reports
    ]
    if len(reports) > 1:
        rows.append([
            reports[0].regime, "mean", "-",
            f"{np.mean([r.target_acc for r in reports]):.2f}", "-", "-",
        ])
    return aligned_table(headers, rows)


def ablation_table(rows: list[AblationRow]) -> str:
    headers = ["mode", "base", "new", "H", "final_loss", "params", "grad_inactive"]
    body = [
        [
            row.mode, f"{row.report.base_acc:.2f}", f"{row.report.new_acc:.2f}",
            f"{row.report.hmean:.2f}", f"{row.final_loss:.4f}",
            str(row.param_count), ",".join(row.grad_inactive) or "-",
        ]
        for row in rows
    ]
    return aligned_table(headers, body)


def write_report_files(report: EvalReport, out_dir: Path) -> list[Path]:
    """Emit .txt/.kv/.png for one report; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = report_stem(report)
    txt = out_dir / f"{stem}.txt"
    kv = out_dir / f"{stem}.kv"
    png = out_dir / f"{stem}.png"
    if report.regime == "B2N":
        txt.write_text(b2n_table([report]), encoding="utf-8")
    else:
        txt.write_text(transfer_table([report]), encoding="utf-8")
    kv.write_text(kv_text(report.to_kv()), encoding="utf-8")
    render_report_figure(report, png)
    return [txt, kv, png]


def render_report_figure(report: EvalReport, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    if report.regime == "B2N":
        bars = [report.base_acc, report.new_acc, report.hmean]
        ax.bar(["base", "new", "H"], bars, color=["#4878d0", "#ee854a", "#6acc64"])
        ax.set_ylabel("top-1 accuracy (%)")
    else:
        ax.bar(["target"], [report.target_acc], color="#4878d0")
        ax.set_ylabel("top-1 accuracy (%)")
    ax.set_ylim(0, 105)
    ax.set_title(report_stem(report), fontsize=9)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def render_loss_curve(loss_log: list[tuple], path: Path) -> None:
    steps = [row[0] for row in loss_log]
    losses = [row[3] for row in loss_log]
    fig, ax = plt.subplots(figsize=(4.8, 3.0))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss", fontsize=9)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def render_ablation_figure(rows: list[AblationRow], path: Path) -> None:
    modes = [r.mode for r in rows]
    x = np.arange(len(modes))
    width = 0.27
    fig, ax = plt.subplots(figsize=(5.6, 3.2))
    ax.bar(x - width, [r.report.base_acc for r in rows], width, label="base")
    ax.bar(x, [r.report.new_acc for r in rows], width, label="new")
    ax.bar(x + width, [r.report.hmean for r in rows], width, label="H")
    ax.set_xticks(x, modes)
    ax.set_ylim(0, 105)
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend(fontsize=8)
    ax.set_title("context-generation ablations", fontsize=9)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def render_seed_summary(reports: list[EvalReport], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 3.0))
    seeds = [str(r.seed) for r in reports]
    if reports[0].regime == "B2N":
        ax.plot(seeds, [r.base_acc for r in reports], "o-", label="base")
        ax.plot(seeds, [r.new_acc for r in reports], "s-", label="new")
        ax.plot(seeds, [r.hmean for r in reports], "^-", label="H")
    else:
        ax.plot(seeds, [r.target_acc for r in reports], "o-", label="target")
    ax.set_xlabel("seed")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend(fontsize=8)
    ax.set_title(f"{reports[0].regime} across seeds", fontsize=9)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
