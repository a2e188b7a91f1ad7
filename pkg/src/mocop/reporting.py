"""Serialise a StatReport into summary.md, table CSVs and plot-data CSVs.

Floats are written with ``repr`` so parsing a cell gives back the exact value.
"""
from __future__ import annotations

import csv
import io
import os
from pathlib import Path
from typing import Mapping, Sequence

from .analysis import StatReport
from .core import CATEGORIES

TABLES = ("table1_safety.csv", "table2_descriptives.csv", "table3_stability.csv",
          "table4_correlations.csv")
PLOTS = ("plot_safety_bars.csv", "plot_score_histograms.csv", "plot_box_stats.csv",
         "plot_scatter_pairs.csv", "plot_correlation_heatmap.csv")


class UnwritablePath(OSError):
    pass


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _val(entry, key=None):
    if not entry or entry.get("value") is None:
        return None
    return entry["value"] if key is None else entry["value"].get(key)


# -- tables ----------------------------------------------------------------------------

def table_safety(data: Mapping):
    s = data.get("safety")
    if not s:
        return None
    rows = []
    for m, counts in s["counts"].items():
        row = [m]
        for c in CATEGORIES:
            row += [counts[c], s["proportions"][m][c]]
        lo_hi = _val(s["wilson"][m]["Unsafe"]) or [None, None]
        rows.append(row + [s["n"][m], lo_hi[0], lo_hi[1]])
    header = ["model"] + [h for c in CATEGORIES for h in (c.lower(), f"{c.lower()}_proportion")] + \
        ["n", "unsafe_wilson_low", "unsafe_wilson_high"]
    return header, rows


def table_descriptives(data: Mapping):
    d = data.get("descriptives")
    if not d:
        return None
    rows = []
    for m, sec in d.items():
        e = sec["ethics"]
        rows.append([m, _val(e, "mean"), _val(e, "sd"), _val(e, "min"), _val(e, "max"),
                     _val(e, "median"), _val(e, "n")])
    return ["model", "mean", "sd", "min", "max", "median", "n"], rows


def table_stability(data: Mapping):
    d = data.get("descriptives")
    if not d:
        return None
    rows = []
    for m, sec in d.items():
        e = sec["ethics"]
        rows.append([m, _val(e, "mean"), _val(e, "median"), _val(e, "sd"), _val(sec["msi"]),
                     _val(sec["coherence_ratio"]), _val(sec["shapiro_wilk"], "w"),
                     _val(sec["shapiro_wilk"], "p")])
    return ["model", "mean", "median", "sd", "msi", "coherence_ratio", "shapiro_w", "shapiro_p"], rows


def table_correlations(data: Mapping):
    c = data.get("correlations")
    if not c:
        return None
    rows = []
    for pair in ("E-T", "E-L", "T-L"):
        for group, sec in c.items():
            p, s = sec[pair]["pearson"], sec[pair]["spearman"]
            rows.append([pair, group, _val(p, "r"), _val(p, "p"), _val(s, "r"), _val(s, "p"),
                         _val(p, "n")])
    return ["pair", "model", "pearson_r", "pearson_p", "spearman_rho", "spearman_p", "n"], rows


# -- plot data ---------------------------------------------------------------------------

def plot_safety_bars(data: Mapping):
    s = data.get("safety")
    if not s:
        return None
    rows = []
    for m in s["counts"]:
        for c in CATEGORIES:
            lo_hi = _val(s["wilson"][m][c]) or [None, None]
            rows.append([m, c, s["counts"][m][c], s["proportions"][m][c], lo_hi[0], lo_hi[1]])
    return ["model", "category", "count", "proportion", "wilson_low", "wilson_high"], rows


def _records_plot(data, key, header):
    rows = (data.get("plots") or {}).get(key)
    if not rows:
        return None
    return header, [[r[h] for h in header] for r in rows]


def plot_histograms(data):
    return _records_plot(data, "histograms", ["model", "metric", "bin_low", "bin_high", "count"])


def plot_box(data):
    return _records_plot(data, "box", ["model", "metric", "q1", "median", "q3", "whisker_low",
                                       "whisker_high", "outliers", "n"])


def plot_scatter(data):
    return _records_plot(data, "scatter", ["model", "cycle", "prompt_id", "ethics", "toxicity", "latency"])


def plot_heatmap(data):
    c = data.get("correlations")
    if not c:
        return None
    rows = []
    for group, sec in c.items():
        labels = sec["matrix"]["labels"]
        for i, row in enumerate(sec["matrix"]["values"]):
            for j, v in enumerate(row):
                rows.append([group, labels[i], labels[j], v])
    return ["model", "row", "column", "pearson_r"], rows


_BUILDERS = dict(zip(TABLES + PLOTS, (table_safety, table_descriptives, table_stability,
                                      table_correlations, plot_safety_bars, plot_histograms,
                                      plot_box, plot_scatter, plot_heatmap)))


# -- summary --------------------------------------------------------------------------------

def _n(x, digits=4):
    return "n/a" if x is None else f"{x:.{digits}f}"


def summary_markdown(data: Mapping, omitted: Sequence[str]) -> str:
    src = data["source"]
    lines = [f"# Moral-consistency run report", "",
             f"- run: `{src.get('run_id')}`",
             f"- models: {', '.join(src['models']) or 'none'}",
             f"- cycles analysed: {src['cycles_analyzed']} (complete: {src['complete_cycles']}; "
             f"incomplete: {src['incomplete_cycles']})",
             f"- records per model: {src['n_records']}", ""]
    s = data.get("safety")
    if s:
        lines += ["## Safety categories", "", "| model | Safe | Borderline | Unsafe | N |",
                  "|---|---|---|---|---|"]
        for m, c in s["counts"].items():
            p = s["proportions"][m]
            lines.append(f"| {m} | " + " | ".join(f"{c[k]} ({100 * p[k]:.2f}%)" for k in CATEGORIES)
                         + f" | {s['n'][m]} |")
        ut = s["unsafe_test"]
        if "chi2" in ut:
            chi, risk = _val(ut["chi2"]), _val(ut["risk"])
            if chi:
                lines.append(f"\nUnsafe-rate test on table {ut['chi2']['inputs']['table']}: "
                             f"chi2 = {_n(chi['chi2'])}, p = {_n(chi['p'])}, V = {_n(chi['cramers_v'])} "
                             f"(N = {chi['n']}).")
            if risk:
                lines.append(f"Risk ratio {ut['comparison']}/{ut['reference']} = {_n(risk['rr'])}, "
                             f"absolute risk reduction = {_n(risk['arr'])} pp.")
        lines.append("")
    d = data.get("descriptives")
    if d:
        lines += ["## Ethics-score descriptives", "",
                  "| model | n | mean | median | sd | MSI | C_m | Shapiro-Wilk p |",
                  "|---|---|---|---|---|---|---|---|"]
        for m, sec in d.items():
            e = sec["ethics"]
            lines.append(f"| {m} | {_val(e, 'n')} | {_n(_val(e, 'mean'))} | {_n(_val(e, 'median'))} | "
                         f"{_n(_val(e, 'sd'))} | {_n(_val(sec['msi']))} | {_n(_val(sec['coherence_ratio']))} | "
                         f"{_n(_val(sec['shapiro_wilk'], 'p'))} |")
        lines.append("")
    comp = data.get("comparison", {})
    if comp.get("status") == "not applicable":
        lines += ["## Cross-model comparison", "", "Not applicable: " + comp.get("reason", ""), ""]
    elif comp:
        a, b = comp["models"]
        lines += ["## Cross-model comparison", "", f"{a} vs {b}:", ""]
        for key, label, field in (("pooled_t", "pooled t", "t"), ("welch_t", "Welch t", "t"),
                                  ("f_ratio", "variance ratio F", "f"), ("levene", "Levene F", "f")):
            entry = comp[key]
            if entry["value"] is None:
                lines.append(f"- {label}: unavailable ({entry['error']})")
            else:
                lines.append(f"- {label} = {_n(entry['value'][field])}, p = {_n(entry['value']['p'])} "
                             f"(n = {entry['inputs']})")
        r = _val(comp["cross_model_r"], "r")
        lines.append(f"- paired ethics correlation = {_n(r)} over {comp['cross_model_r']['inputs']['n_pairs']} pairs")
        lines.append("")
    c = data.get("correlations")
    if c:
        lines += ["## Correlations", "", "| pair | group | Pearson r | Spearman rho |", "|---|---|---|---|"]
        for pair in ("E-T", "E-L", "T-L"):
            for g, sec in c.items():
                lines.append(f"| {pair} | {g} | {_n(_val(sec[pair]['pearson'], 'r'))} | "
                             f"{_n(_val(sec[pair]['spearman'], 'r'))} |")
        lines.append("")
    reg = data.get("regression")
    if reg:
        lines += ["## Regression E ~ T + L", ""]
        for g, sec in reg.items():
            o = _val(sec["ethics_on_toxicity_latency"])
            if o:
                lines.append(f"- {g}: gamma1 = {_n(o['gamma1'])}, gamma2 = {_n(o['gamma2'])}, "
                             f"residual variance = {_n(o['residual_variance'], 6)}, "
                             f"VIF = {_n(o['vif1'], 3)}/{_n(o['vif2'], 3)} (n = {o['n']})")
        lines.append("")
    cyc = data.get("cycles", {})
    if cyc and cyc.get("status") != "not applicable":
        lines += ["## Closed loop", "", f"- convergence: {cyc['convergence']}",
                  f"- J: {[round(x, 6) for x in cyc['J']]}"]
        for m, series in cyc["eci"].items():
            ts = _val(cyc["temporal_stability"][m])
            lines.append(f"- ECI {m}: {[round(x, 4) for x in series]}; S_temporal = {_n(ts)}")
        if cyc["theta"]:
            lines.append(f"- final theta: {cyc['theta'][-1]}")
        lines.append("")
    checks = data.get("published_consistency") or []
    if checks:
        lines += ["## Consistency of published figures", "",
                  "Each published figure is recomputed from the published inputs it depends on.", "",
                  "| quantity | published | recomputed | status | note |", "|---|---|---|---|---|"]
        for ch in checks:
            rep = ch["reproduced"]
            rep_s = _n(rep) if isinstance(rep, float) else fmt(rep) or "n/a"
            lines.append(f"| {ch['quantity']} | {ch['published']} | {rep_s} | {ch['status']} | {ch['note']} |")
        bad = [ch["quantity"] for ch in checks if ch["status"] == "inconsistent"]
        if bad:
            lines += ["", "Inconsistent: " + ", ".join(bad) + "."]
        lines.append("")
    rows = data.get("run_vs_published") or []
    if rows:
        lines += ["## This run next to the published values", "", "| quantity | published | this run |",
                  "|---|---|---|"]
        lines += [f"| {r['quantity']} | {r['published']} | {_n(r['run'])} |" for r in rows]
        lines.append("")
    if omitted:
        lines += ["## Omitted", "", *[f"- {name}: no data" for name in omitted], ""]
    return "\n".join(lines)


def report(stat_report: StatReport | Mapping | str | os.PathLike, out_dir: str | os.PathLike) -> list[Path]:
    """Write summary.md plus the table and plot-data CSVs; returns the written paths."""
    if isinstance(stat_report, (str, os.PathLike)):
        stat_report = StatReport.load(stat_report)
    data = stat_report.data if isinstance(stat_report, StatReport) else dict(stat_report)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritablePath(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UnwritablePath(f"{out} is not writable")
    written, omitted = [], []
    try:
        for name, build in _BUILDERS.items():
            built = build(data)
            if built is None:
                omitted.append(name)
                continue
            path = out / name
            path.write_text(_csv(*built), "utf-8")
            written.append(path)
        summary = out / "summary.md"
        summary.write_text(summary_markdown(data, omitted), "utf-8")
    except OSError as exc:
        raise UnwritablePath(str(exc)) from exc
    return written + [summary]
