"""Metrics CSV, run summaries and the method-by-target comparison table."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

CSV_HEADER = ["round", "test_accuracy", "test_loss", "smoothed_accuracy", "selected_clients", "wall_ms"]
WINDOW = 10


class ReportError(Exception):
    pass


def rolling_mean(values, window: int = WINDOW) -> list[float]:
    """Trailing mean over the last ``min(window, i + 1)`` points.

    Each window is shifted by its first value before summing, so a constant
    series smooths to itself exactly.
    """
    values = [float(v) for v in values]
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i + 1 - window):i + 1]
        out.append(chunk[0] + math.fsum(v - chunk[0] for v in chunk) / len(chunk))
    return out


def _target_key(t: float) -> str:
    return f"{t:g}"


def first_reach(metrics, target: float):
    """First round whose *raw* accuracy meets ``target``, or ``None``."""
    for m in metrics:
        if m.test_accuracy >= target:
            return m
    return None


def summarize(metrics, targets=()) -> dict:
    best = max(metrics, key=lambda m: (m.test_accuracy, -m.round_index))
    out = {
        "rounds": metrics[-1].round_index,
        "round0_accuracy": metrics[0].test_accuracy,
        "final_accuracy": metrics[-1].test_accuracy,
        "best_accuracy": best.test_accuracy,
        "best_round": best.round_index,
        "targets": {},
    }
    for t in targets:
        if not 0 < t <= 1:
            raise ReportError(f"target accuracy {t} outside (0, 1]")
        hit = first_reach(metrics, t)
        out["targets"][_target_key(t)] = (
            {"round": hit.round_index, "accuracy": hit.test_accuracy} if hit else None)
    return out


def metrics_csv(metrics) -> str:
    smooth = rolling_mean([m.test_accuracy for m in metrics])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for m, s in zip(metrics, smooth):
        w.writerow([m.round_index, f"{m.test_accuracy:.6f}", f"{m.test_loss:.6f}", f"{s:.6f}",
                    ";".join(str(c) for c in m.selected_clients), m.wall_millis])
    return buf.getvalue()


def emit_metrics(metrics, out_dir, summary: dict, config: dict | None = None,
                 prefix: str = "") -> tuple[Path, Path]:
    """Write ``<prefix>metrics.csv`` and ``<prefix>summary.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{prefix}metrics.csv"
        json_path = out_dir / f"{prefix}summary.json"
        csv_path.write_text(metrics_csv(metrics))
        doc = dict(summary)
        if config is not None:
            doc["config"] = config
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ReportError(f"cannot write metrics to {out_dir}: {exc}") from exc
    return csv_path, json_path


def load_summary(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ReportError(f"summary file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read summary {path}: {exc}") from exc


def _cell(entry, best: float) -> str:
    if entry is None:
        return f"N/A ({100 * best:.2f}%)"
    return f"{entry['round']} ({100 * entry['accuracy']:.2f}%)"


def compare_table(summaries: dict[str, dict]) -> str:
    """Method x target table of first-reach rounds; ``summaries`` maps a label to a summary."""
    if len(summaries) < 2:
        raise ReportError("compare needs at least two summaries")
    target_sets = {label: tuple(s.get("targets", {})) for label, s in summaries.items()}
    first = next(iter(target_sets.values()))
    for label, ts in target_sets.items():
        if set(ts) != set(first):
            raise ReportError(f"{label} has targets {sorted(ts)}, expected {sorted(first)}")
    targets = sorted(first, key=float)
    header = ["run"] + [f"{100 * float(t):g}%" for t in targets] + ["best"]
    rows = [header]
    for label, s in summaries.items():
        best = s["best_accuracy"]
        rows.append([label] + [_cell(s["targets"][t], best) for t in targets]
                    + [f"{100 * best:.2f}% @ {s['best_round']}"])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
