"""Report output: line-delimited records, fixed-width tables, and figures.

Every benchmark command emits the same content three ways: a ``.jsonl``
record stream (machine readable, one object per line, sorted keys), a plain
table on stdout, and a PNG rendered next to the records. Field names are
documented in docs/reports.md. In deterministic mode all of these are
byte-stable for a given seed; wall-clock timings are therefore kept out of
the record stream and written to a separate ``timings.jsonl`` sidecar that
is exempt from the determinism guarantee.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

# keep PNG bytes free of version-dependent metadata
_PNG_METADATA = {"Software": None}


def write_records(path: str | Path, records: list[dict]) -> None:
    """One JSON object per line, keys sorted, floats via repr (stable)."""
    lines = [json.dumps(r, sort_keys=True, allow_nan=False) for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def format_table(records: list[dict], columns: list[str]) -> str:
    """Fixed-width text table over the chosen columns."""
    if not records:
        return "(no records)\n"

    def fmt(value) -> str:
        if isinstance(value, float):
            return f"{value:.6g}"
        return str(value)

    rows = [[fmt(r.get(c, "")) for c in columns] for r in records]
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(columns)]
    head = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    rule = "  ".join("-" * w for w in widths)
    body = "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows)
    return f"{head}\n{rule}\n{body}\n"


def save_figure(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)


def frontier_figure(
    dipr_points: list[tuple[float, float]],
    topk_points: list[tuple[float, float]],
    path: str | Path,
) -> None:
    """Retrieved-count vs recovery-ratio frontier for both query types."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if dipr_points:
        xs, ys = zip(*sorted(dipr_points))
        ax.plot(xs, ys, marker="o", label="dipr")
    if topk_points:
        xs, ys = zip(*sorted(topk_points))
        ax.plot(xs, ys, marker="s", label="top-k")
    ax.set_xlabel("mean retrieved tokens")
    ax.set_ylabel("mean recovery ratio")
    ax.set_xscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    save_figure(fig, path)


def heads_figure(records: list[dict], path: str | Path) -> None:
    """Per-head token demand: oracle count for 90% recovery vs DIPR count."""
    fig, ax = plt.subplots(figsize=(6, 4))
    heads = [r["kv_head"] for r in records]
    ax.plot(heads, [r["oracle_tokens_90"] for r in records], marker="o",
            label="tokens for 90% recovery")
    ax.plot(heads, [r["dipr_tokens"] for r in records], marker="s",
            label="dipr retrieved")
    ax.set_xlabel("kv head")
    ax.set_ylabel("tokens")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    save_figure(fig, path)


def decode_figure(records: list[dict], path: str | Path) -> None:
    """Per-step recovery ratio and deviation from the full-attention oracle."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    steps = [r["step"] for r in records]
    ax1.plot(steps, [r["recovery_ratio"] for r in records], lw=1)
    ax1.set_ylabel("recovery ratio")
    ax1.grid(True, alpha=0.3)
    ax2.plot(steps, [r["deviation_l2"] for r in records], lw=1, color="tab:red")
    ax2.set_ylabel("L2 deviation vs full")
    ax2.set_xlabel("decode step")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    save_figure(fig, path)


def build_figure(records: list[dict], path: str | Path) -> None:
    """Index memory per construction strategy (timings live in the sidecar)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    labels = [r["strategy"] for r in records]
    xs = range(len(labels))
    ax.bar(xs, [r["index_bytes"] / 1e6 for r in records], color="tab:orange")
    ax.set_xticks(list(xs), labels, rotation=20, ha="right")
    ax.set_ylabel("index MB")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    save_figure(fig, path)


def percentiles(values: list[float], points=(50, 90, 99)) -> dict[str, float]:
    import numpy as np

    if not values:
        return {f"p{p}": 0.0 for p in points}
    arr = np.asarray(values, dtype=np.float64)
    return {f"p{p}": float(np.percentile(arr, p)) for p in points}
