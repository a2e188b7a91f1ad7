"""Acceptance criteria AC1 to AC9, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary. Running this file
directly (``python3 tests/test_acceptance.py``) prints the same lines.
"""
import hashlib
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from mocop import stats  # noqa: E402
from mocop.analysis import analyze  # noqa: E402
from mocop.connector import sample_population  # noqa: E402
from mocop.core import DEEPSEEK_PROFILE, GPT_PROFILE, read_jsonl  # noqa: E402
from mocop.meta import coherence_ratio, msi, temporal_stability  # noqa: E402
from mocop.pipeline import MANIFEST_FILE, RECORDS_FILE, run  # noqa: E402
from mocop.reporting import report  # noqa: E402

RESULTS: dict[str, str] = {}
AC6_CONFIG = {"offline": True, "seed": 0, "n_prompts": 500, "n_cycles": 10}
_runs: dict[str, tuple] = {}
_scratch = Path(tempfile.mkdtemp(prefix="mocop-acceptance-"))


def _verdict(key: str, ok: bool, detail: str) -> bool:
    line = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[key] = line
    print(line)
    return ok


def _closed_loop_run(tag: str):
    if tag not in _runs:
        t0 = time.perf_counter()
        result = run(dict(AC6_CONFIG), _scratch / tag)
        _runs[tag] = (result, time.perf_counter() - t0)
    return _runs[tag]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_ac1_safety_table_statistics():
    t0 = time.perf_counter()
    table = [[23, 493 - 23], [20, 510 - 20]]
    chi = stats.chi2_2x2(table)
    risk = stats.risk_ratio_arr(table)
    elapsed = time.perf_counter() - t0
    checks = [abs(chi.chi2 - 0.338) <= 0.005, abs(chi.chi2 - 0.335) <= 0.01,
              abs(chi.cramers_v - 0.0184) <= 0.0005, abs(risk.rr - 0.840) <= 0.005,
              abs(risk.arr - 0.744) <= 0.01, abs(chi.p - 0.56) <= 0.01, elapsed < 1.0]
    assert _verdict("AC1", all(checks),
                    f"chi2={chi.chi2:.4f} V={chi.cramers_v:.4f} RR={risk.rr:.4f} "
                    f"ARR={risk.arr:.3f}pp p={chi.p:.3f} in {elapsed * 1e3:.1f} ms")


def test_ac2_stability_indices():
    values = (round(msi(0.81, 0.083), 3), round(msi(0.79, 0.067), 3),
              round(coherence_ratio(0.067), 3), round(coherence_ratio(0.072), 3))
    assert _verdict("AC2", values == (0.748, 0.740, 0.933, 0.928),
                    "MSI=%.3f, %.3f; C=%.3f, %.3f" % values)


def test_ac3_variance_ratio():
    f = stats.f_variance_ratio_from_stats(0.067, 493, 0.072, 510).f
    assert _verdict("AC3", abs(f - 0.866) <= 0.001, f"F={f:.4f}")


def test_ac4_wilson_interval():
    lo, hi = stats.wilson_interval(23, 493)
    ok = abs(lo - 0.0313) <= 0.0005 and abs(hi - 0.0690) <= 0.0005
    for n in range(1, 51):
        prev = None
        for k in range(n + 1):
            iv = stats.wilson_interval(k, n)
            ok &= iv.lower <= k / n <= iv.upper
            if prev is not None:
                ok &= iv.lower >= prev.lower and iv.upper >= prev.upper
            prev = iv
    assert _verdict("AC4", ok, f"23/493 -> ({lo:.4f}, {hi:.4f}); exhaustive n<=50 checked")


def test_ac5_calibrated_simulator():
    t0 = time.perf_counter()
    pop = sample_population({"gpt-4-turbo": GPT_PROFILE, "deepseek": DEEPSEEK_PROFILE}, 1000, seed=0)
    models = ("gpt-4-turbo", "deepseek")
    e = np.concatenate([pop[m]["E"] for m in models])
    t = np.concatenate([pop[m]["T"] for m in models])
    lat = np.concatenate([pop[m]["latency"] for m in models])
    r_et, r_el, r_tl = stats.pearson(e, t), stats.pearson(e, lat), stats.pearson(t, lat)
    fit = stats.ols2(e, t, lat)
    cross = stats.pearson(pop[models[0]]["E"], pop[models[1]]["E"])
    elapsed = time.perf_counter() - t0
    ok = (-0.85 <= r_et <= -0.77 and abs(r_el) <= 0.08 and abs(r_tl) <= 0.08
          and -0.84 <= fit.gamma1 <= -0.72 and fit.vif1 < 1.2 and fit.vif2 < 1.2
          and 0.80 <= cross <= 0.88 and elapsed < 10)
    per_model = ", ".join(f"{m} r_ET={stats.pearson(pop[m]['E'], pop[m]['T']):.3f}" for m in models)
    assert _verdict("AC5", ok,
                    f"pooled n=2000 r_ET={r_et:.3f} r_EL={r_el:.3f} r_TL={r_tl:.3f} "
                    f"gamma1={fit.gamma1:.3f} VIF=({fit.vif1:.3f}, {fit.vif2:.3f}) cross r={cross:.3f} "
                    f"in {elapsed:.2f}s [info: {per_model}]")


def test_ac6_closed_loop_convergence():
    result, elapsed = _closed_loop_run("a")
    recs = list(read_jsonl(result.out_dir / RECORDS_FILE))
    theta_ok = all(abs(sum(s.theta.as_tuple()) - 1) <= 1e-9 and min(s.theta.as_tuple()) >= 0.05 - 1e-12
                   for s in result.summaries)
    j = [s.utility for s in result.summaries]
    last_deltas = [abs(b - a) for a, b in zip(j[-4:], j[-3:])]
    stability = {m: temporal_stability([s.eci[m] for s in result.summaries])
                 for m in result.summaries[0].eci}
    prompts = {}
    for r in recs:
        prompts.setdefault(r["prompt_id"], (r["prompt_text"], r["cycle"]))
    from mocop.guard import lexical_entropy
    entropy_ok = all(lexical_entropy(text) < 0.7 for text, _ in prompts.values())
    unique_ok = len({text.lower() for text, _ in prompts.values()}) == len(prompts)
    ok = (result.converged and len(result.summaries) <= 10 and all(d < 1e-3 for d in last_deltas)
          and min(stability.values()) >= 0.95 and theta_ok and entropy_ok and unique_ok and elapsed < 60)
    assert _verdict("AC6", ok,
                    f"status={result.manifest.status} after {len(result.summaries)} cycles, "
                    f"last |dJ|={[f'{d:.1e}' for d in last_deltas]}, "
                    f"S_temporal={ {m: round(v, 4) for m, v in stability.items()} }, "
                    f"{len(prompts)} unique prompts, theta invariants {'held' if theta_ok else 'broken'}, "
                    f"{elapsed:.1f}s")


def test_ac7_category_calibration():
    result, _ = _closed_loop_run("a")
    safety = analyze(result.out_dir)["safety"]
    pooled = {c: sum(safety["counts"][m][c] for m in safety["counts"]) for c in ("Safe", "Borderline", "Unsafe")}
    n = sum(pooled.values())
    share = {c: v / n for c, v in pooled.items()}
    ok = 0.35 <= share["Safe"] <= 0.45 and 0.50 <= share["Borderline"] <= 0.60 and 0.03 <= share["Unsafe"] <= 0.06
    per_model = "; ".join(f"{m} " + "/".join(f"{100 * v:.1f}" for v in safety["proportions"][m].values())
                          for m in safety["proportions"])
    assert _verdict("AC7", ok,
                    f"pooled Safe {100 * share['Safe']:.1f}% Borderline {100 * share['Borderline']:.1f}% "
                    f"Unsafe {100 * share['Unsafe']:.1f}% (n={n}) [info S/B/U: {per_model}]")


def _oracle_rounds(rng) -> float:
    worst = 0.0
    for _ in range(100):
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 3), size=int(rng.integers(3, 25)))
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 3), size=int(rng.integers(3, 25)))
        la, lb = list(a), list(b)
        worst = max(worst, abs(stats.t_test_pooled(a, b).p - oracles.pooled_t(la, lb)[2]))
        worst = max(worst, abs(stats.t_test_welch(a, b).p - oracles.welch_t(la, lb)[2]))
        worst = max(worst, abs(stats.f_variance_ratio(a, b).p - oracles.f_ratio(la, lb)[1]))
        worst = max(worst, abs(stats.levene(a, b).p - oracles.levene(la, lb)[1]))
        table = rng.integers(1, 60, size=(2, 2)).tolist()
        worst = max(worst, abs(stats.chi2_2x2(table).p - oracles.chi2_2x2(table)[1]))
        n = int(rng.integers(3, 25))
        x = rng.normal(size=n)
        y = rng.uniform(-1, 1) * x + rng.normal(size=n)
        worst = max(worst, abs(stats.pearson_test(x, y).p - oracles.pearson(x, y)[1]))
        xi = rng.integers(0, 8, size=n).astype(float)
        yi = xi + rng.integers(-4, 5, size=n)
        xi[0], yi[0] = xi[0] - 100, yi[0] + 100
        ours = stats.spearman_test(xi, yi)
        ref = oracles.spearman(list(xi), list(yi))
        worst = max(worst, abs(ours.r - ref[0]), abs(ours.p - ref[1]))
        df = float(rng.uniform(0.5, 300))
        q = float(rng.normal(scale=4))
        worst = max(worst, abs(stats.special.t_cdf(q, df) - oracles.t_cdf(q, df)))
    return worst


def test_ac8_oracle_equivalence_and_published_flags(tmp_path):
    worst = _oracle_rounds(np.random.default_rng(2024))
    result, _ = _closed_loop_run("a")
    rep = analyze(result.out_dir)
    report(rep, tmp_path)
    status = {c["quantity"]: c["status"] for c in rep["published_consistency"]}
    flagged = ("pooled t", "Welch t", "variance ratio p-value", "residual variance")
    summary = (tmp_path / "summary.md").read_text()
    listed = all(status.get(q) == "inconsistent" and q in summary for q in flagged)
    assert _verdict("AC8", worst <= 1e-6 and listed,
                    f"max |ours - oracle| = {worst:.2e} over 100 instances x 8 kernels; "
                    f"flagged inconsistent: {', '.join(q for q in flagged if status.get(q) == 'inconsistent')}")


def test_ac9_determinism():
    first, _ = _closed_loop_run("a")
    second, _ = _closed_loop_run("b")
    hashes = [(_sha(r.out_dir / RECORDS_FILE), _sha(r.out_dir / MANIFEST_FILE)) for r in (first, second)]
    assert _verdict("AC9", hashes[0] == hashes[1],
                    f"records {hashes[0][0][:12]} vs {hashes[1][0][:12]}, "
                    f"manifest {hashes[0][1][:12]} vs {hashes[1][1][:12]}")


def teardown_module(module):
    shutil.rmtree(_scratch, ignore_errors=True)


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_ac")]
    failed = 0
    for fn in tests:
        try:
            fn(Path(tempfile.mkdtemp())) if "tmp_path" in fn.__code__.co_varnames else fn()
        except AssertionError:
            failed += 1
    teardown_module(None)
    sys.exit(1 if failed else 0)
