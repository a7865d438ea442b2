"""Static HTML report of effect curves and sampler diagnostics.

Figures are inline SVG from matplotlib with a fixed hash salt and no date
metadata, so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import html
import io
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .gcomp import EFFECTS  # noqa: E402

__all__ = ["read_effects_csv", "render_report", "write_report"]

_TITLES = {"IDE": "Interventional direct effect", "IIE": "Interventional indirect effect",
           "TE": "Total effect"}


def read_effects_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("age", "mean", "ci_low", "ci_high"):
            r[k] = float(r[k])
    return rows


def _read_csv(path):
    if path is None or not Path(path).exists():
        return []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _svg(fig) -> str:
    buf = io.StringIO()
    with plt.rc_context({"svg.hashsalt": "edpmed", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    text = buf.getvalue()
    return text[text.index("<svg"):]


def _effect_panels(rows) -> str:
    by = defaultdict(list)
    for r in rows:
        by[r["effect"]].append(r)
    fig, axes = plt.subplots(1, len(EFFECTS), figsize=(11, 3.4), sharey=True)
    for ax, name in zip(axes, EFFECTS):
        pts = sorted(by.get(name, []), key=lambda r: r["age"])
        ages = [r["age"] for r in pts]
        ax.axhline(0.0, color="0.6", lw=0.8)
        if pts:
            ax.fill_between(ages, [r["ci_low"] for r in pts], [r["ci_high"] for r in pts],
                            color="tab:blue", alpha=0.25, lw=0)
            ax.plot(ages, [r["mean"] for r in pts], "o-", color="tab:blue")
        ax.set_title(_TITLES[name], fontsize=10)
        ax.set_xlabel("age")
    axes[0].set_ylabel("difference in survival probability")
    fig.tight_layout()
    return _svg(fig)


def _trace_panel(trace) -> str:
    it = [int(r["iteration"]) for r in trace]
    ll = [float(r["survival_loglik"]) for r in trace]
    occ = [int(r["occupied_cells"]) for r in trace]
    fig, axes = plt.subplots(1, 2, figsize=(11, 2.8))
    axes[0].plot(it, ll, lw=0.6)
    axes[0].set_title("survival log-likelihood", fontsize=10)
    axes[1].plot(it, occ, lw=0.6)
    axes[1].set_title("occupied cells", fontsize=10)
    for ax in axes:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    return _svg(fig)


def _table(header, rows) -> str:
    head = "".join(f"<th>{html.escape(str(h))}</th>" for h in header)
    body = "".join("<tr>" + "".join(f"<td>{html.escape(str(c))}</td>" for c in r) + "</tr>"
                   for r in rows)
    return f"<table><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>"


def _fmt(x, digits=4) -> str:
    return f"{x:.{digits}f}" if math.isfinite(x) else "nan"


def render_report(effects_rows, trace=(), acceptance=()) -> str:
    parts = ["<!DOCTYPE html>", "<html><head><meta charset='utf-8'>",
             "<title>edpmed report</title>",
             "<style>body{font-family:sans-serif;max-width:1100px;margin:auto}"
             "table{border-collapse:collapse}td,th{border:1px solid #bbb;padding:2px 8px}"
             "</style></head><body>", "<h1>Mediation effects on survival</h1>"]
    if effects_rows:
        parts.append(_effect_panels(effects_rows))
        parts.append(_table(
            ["age", "effect", "mean", "95% interval", "draws", "C*", "min C**"],
            [(_fmt(r["age"], 2), r["effect"], _fmt(r["mean"]),
              f"({_fmt(r['ci_low'])}, {_fmt(r['ci_high'])})", r.get("n_draws", ""),
              r.get("c_star", ""), r.get("c_star_star_min", ""))
             for r in sorted(effects_rows, key=lambda r: (r["age"], EFFECTS.index(r["effect"])))]))
    else:
        parts.append("<p class='placeholder'>No results: the effects table is empty.</p>")
    parts.append("<h2>Sampler diagnostics</h2>")
    if trace:
        parts.append(_trace_panel(trace))
        kept = [r for r in trace if r["phase"] == "keep"] or list(trace)
        ll = [float(r["survival_loglik"]) for r in kept]
        mean = sum(ll) / len(ll)
        sd = math.sqrt(sum((x - mean) ** 2 for x in ll) / max(len(ll) - 1, 1))
        occ = [int(r["occupied_cells"]) for r in kept]
        parts.append(_table(["iterations kept", "mean survival log-lik", "sd", "mean occupied cells"],
                            [(len(kept), _fmt(mean, 2), _fmt(sd, 2), _fmt(sum(occ) / len(occ), 2))]))
    else:
        parts.append("<p>No trace available.</p>")
    if acceptance:
        tot = defaultdict(lambda: [0, 0])
        for r in acceptance:
            if r["phase"] == "keep":
                tot[r["block"]][0] += int(r["accepted"])
                tot[r["block"]][1] += int(r["proposed"])
        parts.append(_table(["block", "accepted", "proposed", "rate"],
                            [(k, a, t, _fmt(a / t if t else float("nan"), 3))
                             for k, (a, t) in sorted(tot.items())]))
    parts.append("</body></html>\n")
    return "\n".join(parts)


def write_report(effects_csv, out_path, trace_csv=None, acceptance_csv=None) -> Path:
    rows = read_effects_csv(effects_csv)
    text = render_report(rows, _read_csv(trace_csv), _read_csv(acceptance_csv))
    out = Path(out_path)
    out.write_text(text, encoding="utf-8")
    return out
