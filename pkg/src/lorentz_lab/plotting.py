"""Static distance-vs-n figures from a ledger (needs the ``plot`` extra)."""

from __future__ import annotations

import io
import logging
import math
from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path

from lorentz_lab.persistence import Ledger, atomic_write_bytes

log = logging.getLogger(__name__)


def ledger_curves(
    ledger_path: Path, metrics: Sequence[str] | None = None
) -> dict[str, list[tuple[float, float, float]]]:
    """``metric -> [(n_or_t, value, stderr), ...]`` sorted by ``n_or_t``.

    Rows without a finite ``n_or_t`` (rate fits) are skipped.
    """
    curves: dict[str, list[tuple[float, float, float]]] = defaultdict(list)
    for row in Ledger.load(ledger_path):
        if metrics and row["metric"] not in metrics:
            continue
        x = float(row["n_or_t"])
        if not math.isfinite(x):
            continue
        curves[row["metric"]].append((x, float(row["value"]), float(row["stderr"])))
    return {m: sorted(points) for m, points in sorted(curves.items())}


def plot_ledger(
    ledger_path: Path, out_path: Path, metrics: Sequence[str] | None = None
) -> Path | None:
    """Draw one log-x curve per metric with stderr bars and save a PNG.

    Returns ``None`` without writing anything when no row qualifies.
    """
    curves = ledger_curves(ledger_path, metrics)
    if not curves:
        log.warning("No plottable rows in %s", ledger_path)
        return None

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for metric, points in curves.items():
        x, y, err = zip(*points, strict=True)
        yerr = [e if math.isfinite(e) else 0.0 for e in err]
        ax.errorbar(x, y, yerr=yerr, marker="o", capsize=3, label=metric)
    ax.set_xscale("log")
    ax.set_xlabel("n or t")
    ax.set_ylabel("value")
    ax.legend(fontsize="small")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()

    buffer = io.BytesIO()
    # Fixed metadata keeps the PNG bytes reproducible.
    fig.savefig(buffer, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(out_path, buffer.getvalue())
    log.info("Wrote %d curves to %s", len(curves), out_path)
    return out_path
