"""Figures for the CLI reports (file output only, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "axes.labelsize": 9,
    "font.size": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path, meta):
    # PNG text chunks carry the provenance
    md = {"Software": "certctl"}
    md.update({k: str(v) for k, v in (meta or {}).items()})
    fig.savefig(path, dpi=110, metadata=md)
    plt.close(fig)


def training_curve(log, path, meta=None):
    ep = np.array([r["episode"] for r in log])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
        axes[0].plot(ep, [r["return"] for r in log], lw=1, label="return")
        ev = [(r["episode"], r["eval_score"]) for r in log if np.isfinite(r["eval_score"])]
        if ev:
            axes[0].plot(*zip(*ev), "o", ms=3, label="evaluation")
        axes[0].set_ylabel("episode return")
        axes[0].legend(frameon=False)
        for key in ("mean_loss_V", "mean_loss_B", "mean_loss_C", "mean_loss_io"):
            vals = np.array([r[key] for r in log], dtype=float)
            if np.any(vals > 0):
                axes[1].semilogy(ep, np.maximum(vals, 1e-12), lw=1, label=key[5:])
        axes[1].set_xlabel("episode")
        axes[1].set_ylabel("mean loss")
        axes[1].legend(frameon=False)
        fig.tight_layout()
        _save(fig, path, meta)


def episode_traces(traces, path, labels=None, meta=None):
    """State, barrier and V panels for a handful of traces."""
    labels = labels or [f"episode {i}" for i in range(len(traces))]
    nb = traces[0].B.shape[1] if traces else 0
    n_rows = 3 if nb else 2
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n_rows, 1, figsize=(6, 2.0 * n_rows), sharex=True)
        for tr, lab in zip(traces, labels):
            line, = axes[0].plot(tr.t, tr.x[:, 0], lw=1, label=lab)
            axes[1].semilogy(tr.t, np.maximum(tr.V, 1e-12), lw=1, color=line.get_color())
            if nb:
                axes[2].plot(tr.t, tr.B.min(axis=1), lw=1, color=line.get_color())
        axes[0].set_ylabel("x0")
        axes[1].set_ylabel("V")
        if nb:
            axes[2].axhline(0.0, color="k", lw=0.6)
            axes[2].set_ylabel("min B")
        axes[-1].set_xlabel("time [s]")
        if len(traces) <= 8:
            axes[0].legend(frameon=False)
        fig.tight_layout()
        _save(fig, path, meta)


def compare_panels(t, series: dict, path, meta=None):
    """``series`` maps variant -> {"eta_norm": array, "B_min": array or None}."""
    has_b = any(s.get("B_min") is not None for s in series.values())
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2 if has_b else 1, 1, figsize=(6, 4 if has_b else 2.5),
                                 sharex=True, squeeze=False)
        axes = axes[:, 0]
        for name, s in series.items():
            n = len(s["eta_norm"])
            axes[0].plot(t[:n], s["eta_norm"], lw=1, label=name)
            if has_b and s.get("B_min") is not None:
                axes[1].plot(t[:n], s["B_min"], lw=1, label=name)
        axes[0].set_ylabel("|eta|")
        axes[0].legend(frameon=False)
        if has_b:
            axes[1].axhline(0.0, color="k", lw=0.6)
            axes[1].set_ylabel("min B")
        axes[-1].set_xlabel("time [s]")
        fig.tight_layout()
        _save(fig, path, meta)
