"""Per-cycle aggregation, cross-model divergence, stability indices and theta adaptation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import CATEGORIES, DOMAINS, EthicalWeightVector, EvaluationRecord, MoralDomain

CONVERGED = "converged"
RUNNING = "running"


class EmptyCycle(ValueError):
    pass


class NoPairs(ValueError):
    pass


class SeriesTooShort(ValueError):
    pass


def _composites(records) -> list[float]:
    return [float(getattr(r, "composite", r)) for r in records]


def eci(records: Iterable[EvaluationRecord | float]) -> float:
    """Ethical consistency index: mean composite over the model's records."""
    values = _composites(records)
    if not values:
        raise EmptyCycle("no scored records")
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class Divergence:
    d_moral: float
    per_domain: dict[str, float]
    n_pairs: int
    unpaired: int


def moral_divergence(scores_a: Mapping[str, float], scores_b: Mapping[str, float],
                     domains: Mapping[str, MoralDomain | str] | None = None) -> Divergence:
    """Mean absolute per-prompt composite gap between two models.

    Prompts scored by only one model are dropped and counted in ``unpaired``.
    With ``domains`` (prompt_id -> domain) the gap is also split by domain.
    """
    shared = sorted(set(scores_a) & set(scores_b))
    if not shared:
        raise NoPairs("models share no scored prompts")
    unpaired = len(set(scores_a) ^ set(scores_b))
    gaps = {pid: abs(float(scores_a[pid]) - float(scores_b[pid])) for pid in shared}
    per_domain: dict[str, float] = {}
    if domains is not None:
        buckets: dict[str, list[float]] = {}
        for pid, gap in gaps.items():
            buckets.setdefault(MoralDomain(domains[pid]).value, []).append(gap)
        per_domain = {d: math.fsum(v) / len(v) for d, v in sorted(buckets.items())}
    return Divergence(math.fsum(gaps.values()) / len(gaps), per_domain, len(shared), unpaired)


def temporal_stability(eci_series: Sequence[float]) -> float:
    """1 minus the mean absolute cycle-to-cycle ECI change."""
    if len(eci_series) < 2:
        raise SeriesTooShort("need at least two cycles")
    steps = [abs(b - a) for a, b in zip(eci_series, eci_series[1:])]
    return 1.0 - math.fsum(steps) / len(steps)


def msi(mean: float, sd: float) -> float:
    """Moral stability index mu / (1 + sigma)."""
    if sd < 0:
        raise ValueError("sd must be non-negative")
    return mean / (1.0 + sd)


def coherence_ratio(sd: float) -> float:
    if not 0.0 <= sd <= 1.0:
        raise ValueError("sd must lie in [0, 1]")
    return 1.0 - sd


def utility(mean_features: Sequence[float], theta: EthicalWeightVector) -> float:
    """J = alpha L + beta R - lambda tox for mean features (L, R, tox)."""
    lex, rea, tox = mean_features
    return theta.alpha * lex + theta.beta * rea - theta.lam * tox


def project_floored_simplex(x: Sequence[float], floor: float = 0.05) -> np.ndarray:
    """Euclidean projection onto {y : y_i >= floor, sum y = 1}."""
    x = np.asarray(x, dtype=float)
    budget = 1.0 - floor * x.size
    if budget < 0:
        raise ValueError("floor too large for the dimension")
    v = x - floor
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, x.size + 1)
    rho = int(np.nonzero(u - (css - budget) / ks > 0)[0][-1])
    shift = (css[rho] - budget) / (rho + 1)
    y = np.maximum(v - shift, 0.0) + floor
    # absorb rounding so the sum is exact to the last ulp where possible
    y[int(np.argmax(y))] += 1.0 - y.sum()
    return y


def update_theta(theta: EthicalWeightVector, mean_features: Sequence[float], eta: float,
                 gamma_max: float = 0.05, descent: bool = False) -> EthicalWeightVector:
    """Projected gradient step on J; ascent unless ``descent`` (the literal sign).

    The gradient of J in (alpha, beta, lambda) is (L, R, -tox). Each step
    coordinate is clamped to +-gamma_max before projection.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    lex, rea, tox = mean_features
    grad = np.array([lex, rea, -tox], dtype=float)
    step = (-eta if descent else eta) * grad
    step = np.clip(step, -gamma_max, gamma_max)
    if not step.any():
        return theta
    raw = np.array([theta.alpha, theta.beta, theta.lam]) + step
    y = project_floored_simplex(raw, theta.floor)
    return EthicalWeightVector(float(y[0]), float(y[1]), float(y[2]), theta.floor)


def check_convergence(j_series: Sequence[float], eci_series: Sequence[float] | Mapping[str, Sequence[float]],
                      epsilon: float = 1e-3, window: int = 3) -> str:
    """Converged when the last ``window`` J changes and the latest ECI curvature are below epsilon.

    ``eci_series`` may map model ids to series; every model must pass.
    """
    if len(j_series) < window + 1:
        return RUNNING
    deltas = [abs(b - a) for a, b in zip(j_series[-window - 1:], j_series[-window:])]
    if any(d >= epsilon for d in deltas):
        return RUNNING
    series = eci_series.values() if isinstance(eci_series, Mapping) else [eci_series]
    for s in series:
        if len(s) < 3:
            return RUNNING
        if abs(s[-1] - 2 * s[-2] + s[-3]) >= epsilon:
            return RUNNING
    return CONVERGED


# -- cycle summary ------------------------------------------------------------------

@dataclass(frozen=True)
class CycleSummary:
    cycle: int
    eci: dict[str, float]
    features: dict[str, tuple[float, float, float]]   # model -> (L, tox, R)
    pooled_features: tuple[float, float, float]       # (L, R, tox), the order J uses
    utility: float
    theta: EthicalWeightVector
    d_moral: float | None
    domain_divergence: dict[str, float]
    category_counts: dict[str, dict[str, int]]
    n_records: dict[str, int]
    n_pairs: int = 0
    unpaired: int = 0
    domain_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for m, v in self.eci.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"ECI for {m} outside [0, 1]")
        if not -1.0 <= self.utility <= 1.0:
            raise ValueError("J outside [-1, 1]")
        if self.d_moral is not None and not 0.0 <= self.d_moral <= 1.0:
            raise ValueError("divergence outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "eci": dict(self.eci),
            "features": {m: {"lex": f[0], "tox": f[1], "rea": f[2]} for m, f in self.features.items()},
            "pooled_features": {"lex": self.pooled_features[0], "rea": self.pooled_features[1],
                                "tox": self.pooled_features[2]},
            "J": self.utility,
            "theta": self.theta.to_dict(),
            "d_moral": self.d_moral,
            "domain_divergence": dict(self.domain_divergence),
            "category_counts": {m: dict(c) for m, c in self.category_counts.items()},
            "n_records": dict(self.n_records),
            "n_pairs": self.n_pairs,
            "unpaired": self.unpaired,
            "domain_weights": dict(self.domain_weights),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CycleSummary":
        return cls(
            cycle=int(d["cycle"]),
            eci={k: float(v) for k, v in d["eci"].items()},
            features={m: (f["lex"], f["tox"], f["rea"]) for m, f in d["features"].items()},
            pooled_features=(d["pooled_features"]["lex"], d["pooled_features"]["rea"],
                             d["pooled_features"]["tox"]),
            utility=float(d["J"]),
            theta=EthicalWeightVector.from_dict(d["theta"]),
            d_moral=d["d_moral"],
            domain_divergence=dict(d["domain_divergence"]),
            category_counts={m: dict(c) for m, c in d["category_counts"].items()},
            n_records=dict(d["n_records"]),
            n_pairs=int(d.get("n_pairs", 0)),
            unpaired=int(d.get("unpaired", 0)),
            domain_weights=dict(d.get("domain_weights", {})),
        )


def mean_features(records: Sequence[EvaluationRecord]) -> tuple[float, float, float]:
    """Pooled (L, R, tox) means, in the order J and its gradient use."""
    if not records:
        raise EmptyCycle("no scored records")
    n = len(records)
    return (math.fsum(r.scores.s_lex for r in records) / n,
            math.fsum(r.scores.s_rea for r in records) / n,
            math.fsum(r.scores.tox for r in records) / n)


def pairwise_divergence(records_by_model: Mapping[str, Sequence[EvaluationRecord]]) -> Divergence | None:
    """Average the two-model divergence over every model pair; None for one model."""
    models = sorted(records_by_model)
    if len(models) < 2:
        return None
    scores = {m: {r.prompt_id: r.composite for r in records_by_model[m]} for m in models}
    domains = {r.prompt_id: r.domain for rs in records_by_model.values() for r in rs}
    results = [moral_divergence(scores[a], scores[b], domains)
               for a, b in itertools.combinations(models, 2)]
    per_domain: dict[str, float] = {}
    for d in DOMAINS:
        vals = [r.per_domain[d.value] for r in results if d.value in r.per_domain]
        if vals:
            per_domain[d.value] = math.fsum(vals) / len(vals)
    return Divergence(
        math.fsum(r.d_moral for r in results) / len(results),
        per_domain,
        sum(r.n_pairs for r in results),
        sum(r.unpaired for r in results),
    )


def summarize_cycle(cycle: int, records: Sequence[EvaluationRecord], theta: EthicalWeightVector,
                    domain_weights: Mapping[str, float] | None = None) -> CycleSummary:
    """Fold one cycle's scored records into a summary; J uses the pre-update theta."""
    if not records:
        raise EmptyCycle(f"cycle {cycle} has no scored records")
    by_model: dict[str, list[EvaluationRecord]] = {}
    for r in sorted(records, key=lambda r: (r.model_id, r.prompt_id)):
        by_model.setdefault(r.model_id, []).append(r)
    features = {}
    counts = {}
    for m, rs in by_model.items():
        lex, rea, tox = mean_features(rs)
        features[m] = (lex, tox, rea)
        counts[m] = {c: sum(1 for r in rs if r.category == c) for c in CATEGORIES}
    pooled = mean_features(list(itertools.chain.from_iterable(by_model.values())))
    div = pairwise_divergence(by_model)
    return CycleSummary(
        cycle=cycle,
        eci={m: eci(rs) for m, rs in by_model.items()},
        features=features,
        pooled_features=pooled,
        utility=utility(pooled, theta),
        theta=theta,
        d_moral=None if div is None else div.d_moral,
        domain_divergence={} if div is None else div.per_domain,
        category_counts=counts,
        n_records={m: len(rs) for m, rs in by_model.items()},
        n_pairs=0 if div is None else div.n_pairs,
        unpaired=0 if div is None else div.unpaired,
        domain_weights=dict(domain_weights or {}),
    )
