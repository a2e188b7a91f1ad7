"""Statistical analysis of a record log into a single structured report.

Every statistic is stored as ``{"value": ..., "inputs": ...}``; a statistic
that cannot be computed keeps ``value = None`` and gains an ``error`` note so
the rest of the report survives.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import stats
from .core import CATEGORIES, EvaluationRecord, read_jsonl
from .meta import (
    CycleSummary,
    check_convergence,
    coherence_ratio,
    moral_divergence,
    msi,
    temporal_stability,
)

HIST_BINS = 20
NOT_APPLICABLE = "not applicable"


@dataclass
class StatReport:
    data: dict

    def to_dict(self) -> dict:
        return self.data

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "StatReport":
        return cls(json.loads(Path(path).read_text("utf-8")))

    def __getitem__(self, key):
        return self.data[key]


def load_expectations(path: str | Path | None = None) -> dict:
    if path is None:
        raw = resources.files("mocop.data").joinpath("published_expectations.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    return json.loads(raw)


def _plain(value):
    if hasattr(value, "_asdict"):
        return {k: _plain(v) for k, v in value._asdict().items()}
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def stat(fn: Callable[[], Any], **inputs) -> dict:
    """Evaluate one statistic, turning a failure into an annotated null."""
    try:
        return {"value": _plain(fn()), "inputs": inputs}
    except (ValueError, ArithmeticError, TypeError) as exc:
        return {"value": None, "error": f"{type(exc).__name__}: {exc}", "inputs": inputs}


# -- loading ---------------------------------------------------------------------------

def _run_files(source: str | Path) -> tuple[Path, Path | None, Path | None]:
    p = Path(source)
    if p.is_dir():
        rec = p / "records.jsonl"
        base = p
    else:
        rec = p
        base = p.parent
    cyc = base / "cycles.jsonl"
    man = base / "manifest.json"
    return rec, (cyc if cyc.exists() else None), (man if man.exists() else None)


def load_run(source: str | Path):
    """Read records, cycle summaries and manifest; tolerant of a torn tail."""
    rec_path, cyc_path, man_path = _run_files(source)
    records = []
    for row in read_jsonl(rec_path):
        try:
            records.append(EvaluationRecord.from_dict(row))
        except (KeyError, TypeError, ValueError):
            continue
    cycles = []
    if cyc_path is not None:
        for row in read_jsonl(cyc_path):
            try:
                cycles.append(CycleSummary.from_dict(row))
            except (KeyError, TypeError, ValueError):
                continue
    manifest = None
    if man_path is not None:
        try:
            manifest = json.loads(man_path.read_text("utf-8"))
        except ValueError:
            manifest = None
    return records, cycles, manifest


def complete_cycles(records: Sequence[EvaluationRecord], cycles: Sequence[CycleSummary],
                    manifest: Mapping | None) -> list[int]:
    """Cycles whose records were fully written.

    A cycle summary is only appended after its records, so a summary line
    proves completeness. Without summaries the manifest's counter is used;
    failing that the last cycle seen is assumed partial.
    """
    seen = sorted({r.cycle for r in records})
    if cycles:
        done = {c.cycle for c in cycles}
        return [c for c in seen if c in done]
    if manifest is not None and "cycles_completed" in manifest:
        return [c for c in seen if c < int(manifest["cycles_completed"])]
    return seen[:-1]


# -- sections ------------------------------------------------------------------------------

def _series(records, model):
    rs = [r for r in records if r.model_id == model]
    return (np.array([r.composite for r in rs]), np.array([r.scores.tox for r in rs]),
            np.array([r.latency for r in rs]))


def _safety(records, models) -> dict:
    counts = {m: {c: 0 for c in CATEGORIES} for m in models}
    for r in records:
        counts[r.model_id][r.category] += 1
    n = {m: sum(counts[m].values()) for m in models}
    props = {m: {c: (counts[m][c] / n[m] if n[m] else None) for c in CATEGORIES} for m in models}
    wilson = {m: {c: stat(lambda m=m, c=c: list(stats.wilson_interval(counts[m][c], n[m])),
                          k=counts[m][c], n=n[m])
                  for c in CATEGORIES} for m in models}
    out = {"counts": counts, "n": n, "proportions": props, "wilson": wilson}
    if len(models) >= 2:
        a, b = models[0], models[1]
        table = [[counts[a]["Unsafe"], n[a] - counts[a]["Unsafe"]],
                 [counts[b]["Unsafe"], n[b] - counts[b]["Unsafe"]]]
        out["unsafe_test"] = {
            "reference": a, "comparison": b,
            "chi2": stat(lambda: stats.chi2_2x2(table), table=table),
            "risk": stat(lambda: stats.risk_ratio_arr(table), table=table),
        }
    else:
        out["unsafe_test"] = {"status": NOT_APPLICABLE}
    return out


def _box(values: np.ndarray) -> dict:
    q1, med, q3 = (float(v) for v in np.quantile(values, [0.25, 0.5, 0.75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = values[(values >= lo_fence) & (values <= hi_fence)]
    return {"q1": q1, "median": med, "q3": q3,
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "outliers": int(values.size - inside.size), "n": int(values.size)}


def _descriptives(records, models) -> dict:
    out = {}
    for m in models:
        e, t, lat = _series(records, m)
        desc = stat(lambda: stats.describe(e), n=int(e.size))
        sd = desc["value"]["sd"] if desc["value"] else None
        mean = desc["value"]["mean"] if desc["value"] else None
        out[m] = {
            "ethics": desc,
            "toxicity": stat(lambda: stats.describe(t), n=int(t.size)),
            "latency": stat(lambda: stats.describe(lat), n=int(lat.size)),
            "msi": stat(lambda: msi(mean, sd), mean=mean, sd=sd),
            "coherence_ratio": stat(lambda: coherence_ratio(sd), sd=sd),
            "shapiro_wilk": stat(lambda: stats.shapiro_wilk(e), n=int(e.size)),
        }
    return out


def _paired_ethics(records, a, b):
    key = lambda r: (r.cycle, r.prompt_id)
    sa = {key(r): r.composite for r in records if r.model_id == a}
    sb = {key(r): r.composite for r in records if r.model_id == b}
    shared = sorted(set(sa) & set(sb))
    return np.array([sa[k] for k in shared]), np.array([sb[k] for k in shared])


def _comparison(records, models) -> dict:
    if len(models) < 2:
        return {"status": NOT_APPLICABLE, "reason": "fewer than two models in the log"}
    a, b = models[0], models[1]
    ea, _, _ = _series(records, a)
    eb, _, _ = _series(records, b)
    pa, pb = _paired_ethics(records, a, b)
    sizes = {"n_a": int(ea.size), "n_b": int(eb.size)}
    divs = []
    for c in sorted({r.cycle for r in records}):
        ca = {r.prompt_id: r.composite for r in records if r.model_id == a and r.cycle == c}
        cb = {r.prompt_id: r.composite for r in records if r.model_id == b and r.cycle == c}
        divs.append(stat(lambda: moral_divergence(ca, cb).d_moral, cycle=c, n_a=len(ca), n_b=len(cb)))
    return {
        "models": [a, b],
        "pooled_t": stat(lambda: stats.t_test_pooled(ea, eb), **sizes),
        "welch_t": stat(lambda: stats.t_test_welch(ea, eb), **sizes),
        "f_ratio": stat(lambda: stats.f_variance_ratio(ea, eb), **sizes),
        "levene": stat(lambda: stats.levene(ea, eb), **sizes),
        "cross_model_r": stat(lambda: stats.pearson_test(pa, pb), n_pairs=int(pa.size)),
        "d_moral": divs,
    }


_PAIRS = (("E-T", 0, 1), ("E-L", 0, 2), ("T-L", 1, 2))


def _correlations(records, models) -> dict:
    groups = {m: _series(records, m) for m in models}
    if len(models) > 1:
        groups["pooled"] = tuple(np.concatenate([groups[m][i] for m in models]) for i in range(3))
    out = {}
    for g, cols in groups.items():
        n = int(cols[0].size)
        out[g] = {name: {"pearson": stat(lambda: stats.pearson_test(cols[i], cols[j]), n=n),
                         "spearman": stat(lambda: stats.spearman_test(cols[i], cols[j]), n=n)}
                  for name, i, j in _PAIRS}
        matrix = [[1.0 if i == j else out[g][_pair_name(i, j)]["pearson"]["value"]["r"]
                   if out[g][_pair_name(i, j)]["pearson"]["value"] else None
                   for j in range(3)] for i in range(3)]
        out[g]["matrix"] = {"labels": ["E", "T", "L"], "values": matrix}
    return out


def _pair_name(i, j):
    lo, hi = sorted((i, j))
    return {(0, 1): "E-T", (0, 2): "E-L", (1, 2): "T-L"}[(lo, hi)]


def _regression(records, models) -> dict:
    groups = {m: _series(records, m) for m in models}
    if len(models) > 1:
        groups["pooled"] = tuple(np.concatenate([groups[m][i] for m in models]) for i in range(3))
    out = {}
    for g, (e, t, lat) in groups.items():
        out[g] = {
            "ethics_on_toxicity_latency": stat(lambda: stats.ols2(e, t, lat), n=int(e.size)),
            "toxicity_slope_on_ethics": stat(lambda: _slope(t, e), n=int(e.size)),
        }
    return out


def _slope(y, x) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.size < 2:
        raise stats.InsufficientData("slope needs n >= 2")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise stats.ZeroVariance("predictor is constant")
    return float(dx @ (y - y.mean())) / sxx


def _cycles(cycles: Sequence[CycleSummary], used: Sequence[int], epsilon: float, window: int) -> dict:
    cs = [c for c in cycles if c.cycle in set(used)]
    if not cs:
        return {"status": NOT_APPLICABLE, "reason": "no cycle summaries"}
    models = sorted({m for c in cs for m in c.eci})
    eci = {m: [c.eci[m] for c in cs if m in c.eci] for m in models}
    j = [c.utility for c in cs]
    return {
        "cycles": [c.cycle for c in cs],
        "J": j,
        "eci": eci,
        "d_moral": [c.d_moral for c in cs],
        "theta": [c.theta.to_dict() for c in cs],
        "domain_weights": [c.domain_weights for c in cs],
        "temporal_stability": {m: stat(lambda m=m: temporal_stability(eci[m]), n_cycles=len(eci[m]))
                               for m in models},
        "convergence": check_convergence(j, eci, epsilon, window),
        "delta_J": [b - a for a, b in zip(j, j[1:])],
    }


def _check(name, published, reproduced, ok, note, inputs=None):
    return {"quantity": name, "published": published, "reproduced": reproduced,
            "status": "consistent" if ok else "inconsistent", "note": note,
            "inputs": inputs or {}}


def published_consistency(exp: Mapping) -> list[dict]:
    """Recompute published figures from the published inputs they were derived from."""
    rep = exp["reported"]
    tol = exp.get("tolerance", 0.01)
    sc = exp["safety_counts"]
    gpt, ds = sc["gpt-4-turbo"], sc["deepseek"]
    n_gpt, n_ds = sum(gpt.values()), sum(ds.values())
    table = [[gpt["Unsafe"], n_gpt - gpt["Unsafe"]], [ds["Unsafe"], n_ds - ds["Unsafe"]]]
    chi = stats.chi2_2x2(table)
    risk = stats.risk_ratio_arr(table)
    d2 = exp["descriptives"]
    g2, s2 = d2["gpt-4-turbo"], d2["deepseek"]
    pooled = stats.t_test_pooled_from_stats(g2["mean"], g2["sd"], n_gpt, s2["mean"], s2["sd"], n_ds)
    st = exp["stability"]
    welch = stats.t_test_welch_from_stats(st["deepseek"]["mean"], st["deepseek"]["sd"], n_ds,
                                          st["gpt-4-turbo"]["mean"], st["gpt-4-turbo"]["sd"], n_gpt)
    ftest = stats.f_variance_ratio_from_stats(g2["sd"], n_gpt, s2["sd"], n_ds)
    r_et = rep["r_et"]
    sd_e = math.sqrt((g2["sd"] ** 2 + s2["sd"] ** 2) / 2)
    implied_resid_e = sd_e ** 2 * (1 - r_et ** 2)
    implied_resid_t = exp["toxicity_slope"] ** 2 * sd_e ** 2 * (1 / r_et ** 2 - 1)
    counts_in = {"table": table}
    checks = [
        _check("chi2 (Unsafe, 2x2)", rep["chi2"], chi.chi2, abs(chi.chi2 - rep["chi2"]) <= tol,
               "without continuity correction", counts_in),
        _check("chi2 p-value", rep["chi2_p"], chi.p, abs(chi.p - rep["chi2_p"]) <= tol, "", counts_in),
        _check("Cramer's V", rep["cramers_v"], chi.cramers_v,
               abs(chi.cramers_v - rep["cramers_v"]) <= 0.0005 + 0.0005, "", counts_in),
        _check("risk ratio (Unsafe)", rep["risk_ratio"], risk.rr, abs(risk.rr - rep["risk_ratio"]) <= tol,
               "DeepSeek rate over GPT-4-Turbo rate", counts_in),
        _check("absolute risk reduction (pp)", rep["arr_pp"], risk.arr,
               abs(risk.arr - rep["arr_pp"]) <= tol, "published value rounds 0.744 up", counts_in),
        _check("pooled t", rep["pooled_t"], pooled.t, abs(pooled.t - rep["pooled_t"]) <= tol,
               "means and sds of the descriptive table with the safety-table group sizes",
               {"gpt": g2, "deepseek": s2, "n": [n_gpt, n_ds]}),
        _check("pooled t degrees of freedom", rep["pooled_t_df"], pooled.df,
               pooled.df == rep["pooled_t_df"], "group sizes sum to 1003, not 1000",
               {"n": [n_gpt, n_ds]}),
        _check("Welch t", rep["welch_t"], welch.t, abs(welch.t - rep["welch_t"]) <= tol,
               "means and sds of the stability table",
               {"gpt": st["gpt-4-turbo"], "deepseek": st["deepseek"], "n": [n_gpt, n_ds]}),
        _check("variance ratio F", rep["f_ratio"], ftest.f, abs(ftest.f - rep["f_ratio"]) <= tol,
               "published value truncates 0.866", {"sd": [g2["sd"], s2["sd"]], "n": [n_gpt, n_ds]}),
        _check("variance ratio p-value", f"< {rep['f_p_below']}", ftest.p, ftest.p < rep["f_p_below"],
               "two-sided F test", {"sd": [g2["sd"], s2["sd"]], "n": [n_gpt, n_ds]}),
        _check("residual variance", rep["residual_variance"], implied_resid_e,
               abs(implied_resid_e - rep["residual_variance"]) <= 0.1 * rep["residual_variance"],
               f"implied by r_ET and sd(E); the toxicity-on-ethics form gives {implied_resid_t:.5f}",
               {"r_et": r_et, "sd_e": sd_e, "slope": exp["toxicity_slope"]}),
    ]
    for model, vals in st.items():
        got = msi(vals["mean"], vals["sd"])
        checks.append(_check(f"MSI {model}", vals["msi"], got, round(got, 3) == vals["msi"], "",
                             {"mean": vals["mean"], "sd": vals["sd"]}))
    for model, value in exp["coherence_ratio"].items():
        got = coherence_ratio(d2[model]["sd"])
        checks.append(_check(f"coherence ratio {model}", value, got, round(got, 3) == value, "",
                             {"sd": d2[model]["sd"]}))
    checks.append({"quantity": "Levene F", "published": rep["levene_f"], "reproduced": None,
                   "status": "unverifiable", "note": "needs per-response scores", "inputs": {}})
    return checks


def _run_vs_published(report: Mapping, exp: Mapping) -> list[dict]:
    """Side-by-side of this log's statistics with the published ones (informational)."""
    rep = exp["reported"]
    rows = []
    corr = report["correlations"].get("pooled") or next(iter(report["correlations"].values()), None)

    def get(entry, key):
        return entry["value"][key] if entry and entry.get("value") else None

    if corr:
        rows += [{"quantity": "r_ET", "published": rep["r_et"], "run": get(corr["E-T"]["pearson"], "r")},
                 {"quantity": "r_EL", "published": rep["r_el"], "run": get(corr["E-L"]["pearson"], "r")},
                 {"quantity": "r_TL", "published": rep["r_tl"], "run": get(corr["T-L"]["pearson"], "r")}]
    comp = report["comparison"]
    if "cross_model_r" in comp:
        rows.append({"quantity": "cross-model r", "published": rep["cross_model_r"],
                     "run": get(comp["cross_model_r"], "r")})
    reg = report["regression"].get("pooled") or next(iter(report["regression"].values()), None)
    if reg:
        rows.append({"quantity": "gamma1", "published": rep["gamma1"],
                     "run": get(reg["ethics_on_toxicity_latency"], "gamma1")})
    return rows


def analyze(source: str | Path | Iterable[EvaluationRecord], cycles: str = "last",
            expectations: Mapping | None = None, epsilon: float = 1e-3, window: int = 3) -> StatReport:
    """Build the StatReport for a run directory, a records file or in-memory records.

    ``cycles`` is "last" (last complete cycle) or "all" (every complete cycle).
    """
    if isinstance(source, (str, Path)):
        records, summaries, manifest = load_run(source)
        label = str(source)
        complete = complete_cycles(records, summaries, manifest)
    else:
        records, summaries, manifest = list(source), [], None
        label = "<memory>"
        complete = sorted({r.cycle for r in records})
    if manifest is not None:
        cfg = manifest.get("config", {})
        epsilon = cfg.get("epsilon", epsilon)
        window = cfg.get("convergence_window", window)
    if cycles == "last":
        used = complete[-1:]
    elif cycles == "all":
        used = complete
    else:
        raise ValueError("cycles must be 'last' or 'all'")
    chosen = [r for r in records if r.cycle in set(used)]
    models = list(dict.fromkeys(r.model_id for r in chosen))
    exp = expectations or load_expectations()

    data: dict = {
        "source": {
            "path": label,
            "run_id": (manifest or {}).get("run_id") or (chosen[0].run_id if chosen else None),
            "models": models,
            "cycles_analyzed": list(used),
            "complete_cycles": list(complete),
            "incomplete_cycles": sorted({r.cycle for r in records} - set(complete)),
            "n_records": {m: sum(1 for r in chosen if r.model_id == m) for m in models},
            "run_counts": (manifest or {}).get("counts"),
            "rescale_sem": (manifest or {}).get("config", {}).get("rescale_sem"),
        },
        "expectations_version": exp.get("version"),
    }
    if not chosen:
        data.update({"safety": None, "descriptives": {}, "comparison": {"status": NOT_APPLICABLE},
                     "correlations": {}, "regression": {}, "plots": {},
                     "cycles": {"status": NOT_APPLICABLE}})
    else:
        data["safety"] = _safety(chosen, models)
        data["descriptives"] = _descriptives(chosen, models)
        data["comparison"] = _comparison(chosen, models)
        data["correlations"] = _correlations(chosen, models)
        data["regression"] = _regression(chosen, models)
        data["plots"] = _plots(chosen, models)
        data["cycles"] = _cycles(summaries, complete, epsilon, window)
    data["published_consistency"] = published_consistency(exp)
    data["run_vs_published"] = _run_vs_published(data, exp) if chosen else []
    return StatReport(data)


def _plots(records, models) -> dict:
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    hist = []
    box = []
    scatter = []
    for m in models:
        e, t, lat = _series(records, m)
        for metric, values in (("ethics", e), ("toxicity", t)):
            counts, _ = np.histogram(values, bins=edges)
            hist += [{"model": m, "metric": metric, "bin_low": float(edges[i]),
                      "bin_high": float(edges[i + 1]), "count": int(counts[i])} for i in range(HIST_BINS)]
        for metric, values in (("ethics", e), ("toxicity", t), ("latency", lat)):
            box.append({"model": m, "metric": metric, **_box(values)})
        rs = [r for r in records if r.model_id == m]
        scatter += [{"model": m, "cycle": r.cycle, "prompt_id": r.prompt_id, "ethics": r.composite,
                     "toxicity": r.scores.tox, "latency": r.latency} for r in rs]
    return {"histograms": hist, "box": box, "scatter": scatter}
