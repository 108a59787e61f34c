"""Experiment reports: JSONL/CSV emission and rendered figures.

Reports are versioned via schema_version. Wall-clock fields are dropped
entirely when timestamps are disabled so reruns with the same seed emit
byte-identical JSON and CSV.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

_TIMING_KEYS = (
    "train_s",
    "sym_encrypt_s",
    "key_protect_s",
    "key_recover_s",
    "hesd_s",
    "aggregate_s",
    "decrypt_s",
    "evaluate_s",
)


@dataclass
class RoundReport:
    """Per-round metrics, timings and traffic accounting."""

    round: int
    mode: str
    accuracy: float
    loss: float
    timings: dict = field(default_factory=dict)
    bytes_by_type: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION


@dataclass
class BenchReport:
    """One row of the RSA wrap/unwrap benchmark."""

    rsa_bits: int
    wrap_seconds: float
    unwrap_seconds: float
    input_bytes: int
    max_plaintext_bytes: int
    chunk_count: int
    output_bytes: int
    expansion_ratio: float
    schema_version: int = SCHEMA_VERSION


def round_report_dict(report: RoundReport, include_timings: bool) -> dict:
    out = {
        "schema_version": report.schema_version,
        "round": report.round,
        "mode": report.mode,
        "accuracy": report.accuracy,
        "loss": report.loss,
        "bytes_by_type": dict(sorted(report.bytes_by_type.items())),
        "failures": list(report.failures),
    }
    if include_timings:
        out["timings"] = {k: report.timings.get(k, 0.0) for k in _TIMING_KEYS}
        out["timestamp"] = time.time()
    return out


def write_rounds_jsonl(path: Path, reports: list[RoundReport], include_timings: bool) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(round_report_dict(rep, include_timings), sort_keys=True))
            fh.write("\n")


def write_summary_csv(path: Path, reports: list[RoundReport], include_timings: bool) -> None:
    cols = ["schema_version", "round", "mode", "accuracy", "loss", "total_bytes", "failures"]
    if include_timings:
        cols += list(_TIMING_KEYS)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rep in reports:
            row = [
                rep.schema_version,
                rep.round,
                rep.mode,
                f"{rep.accuracy:.6f}",
                f"{rep.loss:.6f}",
                sum(rep.bytes_by_type.values()),
                len(rep.failures),
            ]
            if include_timings:
                row += [f"{rep.timings.get(k, 0.0):.6f}" for k in _TIMING_KEYS]
            writer.writerow(row)
        if reports:
            last = reports[-1]
            row = [
                last.schema_version,
                "final",
                last.mode,
                f"{last.accuracy:.6f}",
                f"{last.loss:.6f}",
                sum(last.bytes_by_type.values()),
                len(last.failures),
            ]
            if include_timings:
                row += ["" for _ in _TIMING_KEYS]
            writer.writerow(row)


def write_bench_csv(path: Path, rows: list[BenchReport]) -> None:
    cols = [
        "schema_version",
        "rsa_bits",
        "wrap_seconds",
        "unwrap_seconds",
        "input_bytes",
        "max_plaintext_bytes",
        "chunk_count",
        "output_bytes",
        "expansion_ratio",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow(
                [
                    r.schema_version,
                    r.rsa_bits,
                    f"{r.wrap_seconds:.6f}",
                    f"{r.unwrap_seconds:.6f}",
                    r.input_bytes,
                    r.max_plaintext_bytes,
                    r.chunk_count,
                    r.output_bytes,
                    f"{r.expansion_ratio:.4f}",
                ]
            )


def format_bench_table(rows: list[BenchReport]) -> str:
    header = (
        f"{'bits':>5} {'wrap_s':>9} {'unwrap_s':>9} {'input_B':>10} "
        f"{'max_ptx_B':>9} {'chunks':>7} {'output_B':>10} {'expansion':>9}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.rsa_bits:>5} {r.wrap_seconds:>9.3f} {r.unwrap_seconds:>9.3f} "
            f"{r.input_bytes:>10} {r.max_plaintext_bytes:>9} {r.chunk_count:>7} "
            f"{r.output_bytes:>10} {r.expansion_ratio:>9.3f}"
        )
    return "\n".join(lines)


def render_round_figures(outdir: Path, reports: list[RoundReport]) -> list[Path]:
    """Accuracy/loss curves and a timing breakdown, written as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    written: list[Path] = []
    by_mode: dict[str, list[RoundReport]] = {}
    for rep in reports:
        by_mode.setdefault(rep.mode, []).append(rep)

    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.4))
    for mode, reps in sorted(by_mode.items()):
        reps = sorted(reps, key=lambda r: r.round)
        rounds = [r.round for r in reps]
        ax_acc.plot(rounds, [r.accuracy for r in reps], marker="o", label=mode)
        ax_loss.plot(rounds, [r.loss for r in reps], marker="o", label=mode)
    ax_acc.set_xlabel("round")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1)
    ax_loss.set_xlabel("round")
    ax_loss.set_ylabel("loss")
    ax_acc.legend()
    fig.tight_layout()
    acc_path = outdir / "accuracy_loss.png"
    fig.savefig(acc_path, dpi=120)
    plt.close(fig)
    written.append(acc_path)

    fig, ax = plt.subplots(figsize=(7, 3.4))
    any_timings = any(r.timings for r in reports)
    if any_timings:
        reps = sorted(reports, key=lambda r: (r.mode, r.round))
        labels = [f"{r.mode[:4]}:{r.round}" for r in reps]
        bottom = [0.0] * len(reps)
        for key in _TIMING_KEYS:
            vals = [r.timings.get(key, 0.0) for r in reps]
            ax.bar(labels, vals, bottom=bottom, label=key[:-2])
            bottom = [b + v for b, v in zip(bottom, vals)]
        ax.set_ylabel("seconds")
        ax.set_xlabel("mode:round")
        ax.legend(fontsize=7, ncol=2)
        if len(labels) > 12:
            ax.tick_params(axis="x", labelsize=6, rotation=90)
    fig.tight_layout()
    t_path = outdir / "timings.png"
    fig.savefig(t_path, dpi=120)
    plt.close(fig)
    written.append(t_path)
    return written
