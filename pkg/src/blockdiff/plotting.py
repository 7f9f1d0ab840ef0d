"""Report figures for the bench and train commands.

Rendering uses the non-interactive Agg backend, so figures are written to
files and never shown.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_tokens_per_nfe(rows: list[dict], path: str | Path) -> Path:
    """Tokens/NFE against block size, one line per decoding mode.

    ``rows`` are bench records with ``mode``, ``block``, ``tau`` and
    ``tokens_per_nfe``; for MDM only the highest tau is drawn.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mode in sorted({r["mode"] for r in rows}):
            sel = [r for r in rows if r["mode"] == mode and r["tokens_per_nfe"] is not None]
            if mode == "mdm" and sel:
                top = max(r["tau"] for r in sel)
                sel = [r for r in sel if r["tau"] == top]
                mode = f"mdm (tau={top:g})"
            sel.sort(key=lambda r: r["block"])
            if sel:
                ax.plot([r["block"] for r in sel], [r["tokens_per_nfe"] for r in sel],
                        marker="o", label=mode)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("block size B")
        ax.set_ylabel("tokens / NFE")
        if ax.get_lines():
            ax.legend()
        return _save(fig, path)


def plot_tau_sweep(rows: list[dict], path: str | Path) -> Path:
    """MDM Tokens/NFE against the confidence threshold, one line per block size."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        sel = [r for r in rows if r["mode"] == "mdm" and r["tokens_per_nfe"] is not None]
        for block in sorted({r["block"] for r in sel}):
            pts = sorted((r["tau"], r["tokens_per_nfe"]) for r in sel if r["block"] == block)
            ax.plot(*zip(*pts), marker="o", label=f"B={block}")
        ax.set_xlabel("threshold tau")
        ax.set_ylabel("tokens / NFE")
        if sel:
            ax.legend()
        return _save(fig, path)


def plot_loss_curve(history: list[dict], path: str | Path) -> Path:
    """Total, diffusion and causal loss per step, with the active block size."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = [h["step"] for h in history]
        for key in ("total", "diff", "causal"):
            ax.plot(steps, [h[key] for h in history], label=key, lw=1)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(loc="lower left")
        if history:
            twin = ax.twinx()
            twin.step(steps, [h["block_size"] for h in history], where="post", color="0.5", lw=0.8)
            twin.set_ylabel("block size")
            twin.yaxis.set_major_locator(MaxNLocator(integer=True))
            twin.grid(False)
        return _save(fig, path)
