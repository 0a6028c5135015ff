"""Static SVG of a training history CSV."""
import csv
import io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError  # noqa: E402
from .train import HISTORY_COLUMNS  # noqa: E402


def read_history(text):
    """Parse history CSV text into ``{column: [float]}``; blanks become NaN."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise ConfigError("empty metrics CSV", "metrics")
    for col in HISTORY_COLUMNS:
        if col not in reader.fieldnames:
            raise ConfigError(f"missing column {col!r}", col)
    cols = {c: [] for c in HISTORY_COLUMNS}
    for lineno, row in enumerate(reader, start=2):
        for c in HISTORY_COLUMNS:
            cell = (row.get(c) or "").strip()
            try:
                cols[c].append(float(cell) if cell else math.nan)
            except ValueError:
                raise ConfigError(f"line {lineno}: non-numeric value {cell!r}", c) from None
    if not cols["epoch"]:
        raise ConfigError("metrics CSV has no rows", "metrics")
    return cols


def history_figure(cols):
    """Loss curve, grouped accuracy curves and a final-epoch bar chart."""
    fig, (ax_loss, ax_acc, ax_bar) = plt.subplots(1, 3, figsize=(13, 3.8))
    ep = cols["epoch"]
    ax_loss.plot(ep, cols["train_loss"], marker="o", ms=3, label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_title("training loss")
    for c in ("overall", "many", "medium", "few"):
        ax_acc.plot(ep, cols[c], marker="o", ms=3, label=c)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy (%)")
    ax_acc.set_ylim(0, 100)
    ax_acc.set_title("validation accuracy")
    ax_acc.legend(fontsize=8)
    names = ["many", "medium", "few", "overall"]
    vals = [cols[c][-1] for c in names]
    ax_bar.bar(names, [0.0 if math.isnan(v) else v for v in vals], color=["C1", "C2", "C3", "C0"])
    ax_bar.set_ylim(0, 100)
    ax_bar.set_title(f"final epoch ({int(ep[-1])})")
    fig.tight_layout()
    return fig


def plot_history(text, out_path):
    """Write the history SVG; identical input gives identical bytes."""
    cols = read_history(text)
    with plt.rc_context({"svg.hashsalt": "ltfuse", "svg.fonttype": "none"}):
        fig = history_figure(cols)
        fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
