"""Closed-loop orchestration: generate, query, score, aggregate, adapt, repeat.

``run`` persists three files in its output directory: ``records.jsonl`` (one
scored record per line), ``cycles.jsonl`` (one CycleSummary per line) and
``manifest.json``. All are flushed after every cycle so an interrupted run
can still be analysed.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import __version__
from .connector import ConnectorError, SimulatedEndpoint, TextSynthesizer, make_connector
from .core import (
    OFFLINE_EPOCH,
    ConfigError,
    EthicalWeightVector,
    EvaluationRecord,
    ModelResponse,
    RunConfig,
    ScenarioPrompt,
    append_jsonl,
    offline_timestamp,
    rng_for,
    utc_iso,
    validate_config,
)
from .guard import Guard, default_lexicons, load_lexicons
from .meta import CONVERGED, CycleSummary, check_convergence, summarize_cycle, update_theta
from .scenario import (
    DomainWeights,
    ScenarioGenerator,
    allocate_counts,
    load_templates,
    sample_domain,
    update_domain_weights,
)

log = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
CYCLES_FILE = "cycles.jsonl"
FAILURES_FILE = "failures.jsonl"
MANIFEST_FILE = "manifest.json"

__all__ = ["RunManifest", "RunResult", "StorageError", "run", "resolve_out_dir",
           "analyze", "report", "StatReport"]


class StorageError(OSError):
    pass


@dataclass
class ModelCounts:
    attempts: int = 0
    successes: int = 0
    failures: int = 0
    failure_kinds: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"attempts": self.attempts, "successes": self.successes,
                "failures": self.failures, "failure_kinds": dict(sorted(self.failure_kinds.items()))}


@dataclass
class RunManifest:
    run_id: str
    config: dict
    config_hash: str
    lexicon_hash: str
    template_hash: str
    started: str
    finished: str | None
    counts: dict[str, ModelCounts]
    status: str
    converged_cycle: int | None
    cycles_completed: int
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "config_hash": self.config_hash,
            "lexicon_hash": self.lexicon_hash,
            "template_hash": self.template_hash,
            "started": self.started,
            "finished": self.finished,
            "counts": {m: c.to_dict() for m, c in self.counts.items()},
            "status": self.status,
            "converged_cycle": self.converged_cycle,
            "cycles_completed": self.cycles_completed,
            "version": self.version,
        }


@dataclass
class RunResult:
    manifest: RunManifest
    summaries: list[CycleSummary]
    out_dir: Path

    @property
    def converged(self) -> bool:
        return self.manifest.status == CONVERGED


def resolve_out_dir(out: str | os.PathLike | None) -> Path:
    """Explicit path, else $MOCOP_OUT_DIR, else ./mocop-out."""
    return Path(out or os.environ.get("MOCOP_OUT_DIR") or "mocop-out")


def _write_manifest(path: Path, manifest: RunManifest) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8")
    os.replace(tmp, path)


class _VirtualClock:
    """Per-endpoint offline clock: requests start no sooner than the pacing gap allows."""

    def __init__(self, rng, pacing):
        self.rng = rng
        self.pacing = pacing
        self.now: float | None = None
        self.busy_until = 0.0

    def next_start(self) -> float:
        if self.now is None:
            self.now = 0.0
        else:
            gap = float(self.rng.uniform(*self.pacing))
            self.now = max(self.now + gap, self.busy_until)
        return self.now


def _query_all(connector, prompts: Sequence[ScenarioPrompt], clock: _VirtualClock | None):
    out: list[tuple[ScenarioPrompt, ModelResponse | None, str | None]] = []
    for p in prompts:
        try:
            if clock is not None:
                start = clock.next_start()
                resp = connector.query(p, start_time=start)
                clock.busy_until = start + resp.latency
            else:
                resp = connector.query(p)
            out.append((p, resp, None))
        except ConnectorError as exc:
            out.append((p, None, f"{type(exc).__name__}: {exc}"))
    return out


def _make_paraphraser(connector) -> Callable[[str], str]:
    def paraphrase(text: str) -> str:
        request = ScenarioPrompt("paraphrase", "fairness",
                                 f"Rewrite this scenario in different words, same meaning: {text}",
                                 0.0, 0, 0)
        try:
            return connector.query(request).text.strip()
        except ConnectorError:
            return text
    return paraphrase


def _rebalance(active: list[ScenarioPrompt], weights: DomainWeights, n: int,
               divergence: Mapping[str, float], refresh: float):
    """Retire prompts from over-weighted domains, return the domains that need new prompts.

    Lowest-divergence prompts leave first, so the set keeps the cases where
    the models disagree most.
    """
    target = allocate_counts(n, weights)
    by_domain: dict = {}
    for p in active:
        by_domain.setdefault(p.domain, []).append(p)
    keep: list[ScenarioPrompt] = []
    needed = []
    for d, want in target.items():
        have = sorted(by_domain.get(d, []), key=lambda p: (divergence.get(p.prompt_id, 0.0), p.prompt_id))
        survivors = have[max(0, len(have) - want):] if want else []
        survivors = survivors[int(math.floor(refresh * len(survivors))):]
        keep.extend(survivors)
        needed.extend([d] * (want - len(survivors)))
    keep.sort(key=lambda p: p.prompt_id)
    return keep, needed


def run(config: RunConfig | Mapping, out_dir: str | os.PathLike | None = None,
        guard: Guard | None = None) -> RunResult:
    """Execute the evaluation loop until convergence or ``n_cycles``."""
    cfg = validate_config(config)
    out = resolve_out_dir(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name in (RECORDS_FILE, CYCLES_FILE, FAILURES_FILE):
            (out / name).write_text("", "utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write to {out}: {exc}") from exc

    lexicons = load_lexicons(cfg.lexicons_path) if cfg.lexicons_path else default_lexicons()
    guard = guard or Guard(lexicons)
    store = load_templates(cfg.templates_path)
    synth = TextSynthesizer(guard, cfg)
    connectors = {ep.model_id: make_connector(ep, cfg, synth) for ep in cfg.endpoints}
    if len(connectors) < 2:
        raise ConfigError(["endpoints: need at least two models"])
    paraphraser = None
    if cfg.paraphrase_endpoint and not cfg.offline:
        paraphraser = _make_paraphraser(connectors[cfg.paraphrase_endpoint])
    generator = ScenarioGenerator(store, cfg.entropy_ceiling, paraphraser)

    offline = all(isinstance(c, SimulatedEndpoint) for c in connectors.values())
    clocks = {m: _VirtualClock(rng_for(cfg.seeds["pacing"], m), cfg.pacing) for m in connectors} \
        if offline else {m: None for m in connectors}
    config_hash = cfg.snapshot_hash()
    run_id = f"run-{config_hash}" if offline else \
        f"run-{datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%S')}-{config_hash[:8]}"
    started = utc_iso(OFFLINE_EPOCH) if offline else utc_iso(datetime.now(timezone.utc))
    manifest = RunManifest(
        run_id=run_id, config=cfg.to_dict(), config_hash=config_hash,
        lexicon_hash=guard.lexicons.content_hash, template_hash=store.content_hash,
        started=started, finished=None, counts={m: ModelCounts() for m in connectors},
        status="running", converged_cycle=None, cycles_completed=0,
    )
    _write_manifest(out / MANIFEST_FILE, manifest)

    theta = EthicalWeightVector(*cfg.theta0, floor=cfg.theta_floor)
    weights = DomainWeights.uniform()
    active: list[ScenarioPrompt] = []
    divergence_by_prompt: dict[str, float] = {}
    summaries: list[CycleSummary] = []
    j_series: list[float] = []
    eci_series: dict[str, list[float]] = {m: [] for m in connectors}

    for cycle in range(cfg.n_cycles):
        rng = rng_for(cfg.seeds["scenario"], "cycle", cycle)
        if cycle == 0:
            domains = [sample_domain(weights, rng) for _ in range(cfg.n_prompts)]
            active = generator.generate_batch(domains, cycle, rng)
        else:
            kept, needed = _rebalance(active, weights, cfg.n_prompts, divergence_by_prompt,
                                      cfg.refresh_fraction)
            active = kept + generator.generate_batch(needed, cycle, rng)

        with ThreadPoolExecutor(max_workers=len(connectors)) as pool:
            futures = {m: pool.submit(_query_all, c, active, clocks[m]) for m, c in connectors.items()}
            results = {m: f.result() for m, f in futures.items()}

        records: list[EvaluationRecord] = []
        failures = []
        for m, rows in results.items():
            counts = manifest.counts[m]
            for prompt, resp, error in rows:
                counts.attempts += 1
                if resp is not None and resp.ok:
                    counts.successes += 1
                    records.append(guard.score(prompt, resp, cfg, run_id, cycle))
                else:
                    counts.failures += 1
                    kind = (error or "Failed").split(":")[0]
                    counts.failure_kinds[kind] = counts.failure_kinds.get(kind, 0) + 1
                    failures.append({"run_id": run_id, "cycle": cycle, "model_id": m,
                                     "prompt_id": prompt.prompt_id, "error": error})
        if not records:
            log.warning("cycle %d produced no scored records; stopping", cycle)
            manifest.status = "failed"
            break
        try:
            append_jsonl(out / RECORDS_FILE, (r.to_dict() for r in records))
            append_jsonl(out / FAILURES_FILE, failures)
        except OSError as exc:
            raise StorageError(str(exc)) from exc

        summary = summarize_cycle(cycle, records, theta, weights.to_dict())
        summaries.append(summary)
        append_jsonl(out / CYCLES_FILE, [summary.to_dict()])
        j_series.append(summary.utility)
        for m in eci_series:
            if m in summary.eci:
                eci_series[m].append(summary.eci[m])

        by_prompt: dict[str, list[float]] = {}
        for r in records:
            by_prompt.setdefault(r.prompt_id, []).append(r.composite)
        divergence_by_prompt = {p: max(v) - min(v) for p, v in by_prompt.items() if len(v) > 1}

        manifest.cycles_completed = cycle + 1
        status = check_convergence(j_series, eci_series, cfg.epsilon, cfg.convergence_window)
        log.info("cycle %d: J=%.6f ECI=%s status=%s", cycle, summary.utility,
                 {m: round(v, 4) for m, v in summary.eci.items()}, status)
        if status == CONVERGED:
            manifest.status = CONVERGED
            manifest.converged_cycle = cycle
        else:
            weights = update_domain_weights(weights, summary.domain_divergence, cfg.kappa, cfg.gamma_max)
            theta = update_theta(theta, summary.pooled_features, cfg.eta, cfg.gamma_max,
                                 descent=cfg.literal_descent)
        if offline:
            manifest.finished = offline_timestamp(max(c.busy_until for c in clocks.values()))
        else:
            manifest.finished = utc_iso(datetime.now(timezone.utc))
        _write_manifest(out / MANIFEST_FILE, manifest)
        if status == CONVERGED:
            break
    else:
        manifest.status = "max_cycles"

    _write_manifest(out / MANIFEST_FILE, manifest)
    return RunResult(manifest, summaries, out)


from .analysis import StatReport, analyze  # noqa: E402
from .reporting import report  # noqa: E402
