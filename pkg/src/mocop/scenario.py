"""Dataset-free scenario generation and the divergence-driven domain regulator."""
from __future__ import annotations

import json
import math
import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import DOMAINS, ENTROPY_CEILING, MAX_PROMPT_CHARS, MoralDomain, ScenarioPrompt, sha256_text
from .guard import lexical_entropy

MAX_ATTEMPTS = 32
WEIGHT_BAND = (0.10, 0.40)


class GenerationError(RuntimeError):
    pass


class EntropyExhausted(GenerationError):
    pass


class UniquenessExhausted(GenerationError):
    pass


@dataclass(frozen=True)
class ScenarioTemplate:
    domain: MoralDomain
    pattern: str
    slot_lexicons: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(self, "domain", MoralDomain(self.domain))
        lex = {k: tuple(v) for k, v in self.slot_lexicons.items()}
        object.__setattr__(self, "slot_lexicons", lex)
        for slot in self.slots:
            if not lex.get(slot):
                raise ValueError(f"slot {{{slot}}} in pattern has no candidates")

    @property
    def slots(self) -> tuple[str, ...]:
        names = [f for _, f, _, _ in string.Formatter().parse(self.pattern) if f]
        return tuple(dict.fromkeys(names))

    @property
    def space(self) -> int:
        return math.prod(len(self.slot_lexicons[s]) for s in self.slots)

    def fill(self, rng: np.random.Generator) -> str:
        choice = {s: self.slot_lexicons[s][int(rng.integers(len(self.slot_lexicons[s])))]
                  for s in self.slots}
        text = self.pattern.format_map(choice)
        return text[0].upper() + text[1:]


class TemplateStore:
    """Per-domain template grammar. ``min_space`` enforces uniqueness headroom."""

    def __init__(self, templates: Iterable[ScenarioTemplate], min_space: int = 0):
        self.by_domain: dict[MoralDomain, list[ScenarioTemplate]] = {}
        for t in templates:
            self.by_domain.setdefault(t.domain, []).append(t)
        for domain, ts in self.by_domain.items():
            total = sum(t.space for t in ts)
            if total < min_space:
                raise ValueError(f"{domain.value}: slot space {total} below required {min_space}")
        canon = [{"domain": t.domain.value, "pattern": t.pattern,
                  "slots": {k: list(v) for k, v in t.slot_lexicons.items()}}
                 for d in DOMAINS for t in self.by_domain.get(d, [])]
        self.content_hash = sha256_text(json.dumps(canon, sort_keys=True))

    def space(self, domain: MoralDomain) -> int:
        return sum(t.space for t in self.by_domain.get(MoralDomain(domain), []))


def load_templates(path: str | Path | None = None, min_space: int = 200) -> TemplateStore:
    """Load the shipped grammar, or a JSON list of {domain, pattern, slots}."""
    if path is None:
        raw = resources.files("mocop.data").joinpath("templates.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    items = json.loads(raw)
    return TemplateStore(
        (ScenarioTemplate(i["domain"], i["pattern"], i["slots"]) for i in items),
        min_space=min_space,
    )


# -- domain weights -------------------------------------------------------------

class DomainWeights:
    """Categorical weights over the five moral domains."""

    def __init__(self, weights: Mapping[MoralDomain | str, float], check: bool = True):
        w = {MoralDomain(k): float(v) for k, v in weights.items()}
        self.weights = {d: w.get(d, 0.0) for d in DOMAINS}
        if check:
            total = sum(self.weights.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"domain weights sum to {total}, not 1")
            lo, hi = WEIGHT_BAND
            for d, v in self.weights.items():
                if not (lo - 1e-12 <= v <= hi + 1e-12):
                    raise ValueError(f"{d.value} weight {v} outside [{lo}, {hi}]")

    @classmethod
    def uniform(cls) -> "DomainWeights":
        return cls({d: 1.0 / len(DOMAINS) for d in DOMAINS})

    def vector(self) -> np.ndarray:
        return np.array([self.weights[d] for d in DOMAINS])

    def to_dict(self) -> dict[str, float]:
        return {d.value: v for d, v in self.weights.items()}

    def __getitem__(self, d) -> float:
        return self.weights[MoralDomain(d)]

    def __repr__(self) -> str:
        return f"DomainWeights({self.to_dict()})"


def sample_domain(weights: DomainWeights, rng: np.random.Generator) -> MoralDomain:
    """Draw one domain with probability proportional to its weight."""
    w = weights.vector()
    cdf = np.cumsum(w / w.sum())
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return DOMAINS[min(idx, len(DOMAINS) - 1)]


def _clamp_renormalize(w: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # alternate clamping and renormalising the free coordinates until stable
    w = w / w.sum()
    fixed = np.zeros(w.size, dtype=bool)
    for _ in range(w.size + 1):
        out = (w < lo) | (w > hi)
        if not out.any():
            break
        w = np.clip(w, lo, hi)
        fixed |= out
        free = ~fixed
        if not free.any():
            break
        rest = 1.0 - w[fixed].sum()
        w[free] *= rest / w[free].sum()
    return w


def update_domain_weights(weights: DomainWeights,
                          per_domain_divergence: Mapping[MoralDomain | str, float],
                          kappa: float, gamma_max: float = 0.05) -> DomainWeights:
    """Multiplicative reweighting toward domains where models disagree.

    w_c' ~ w_c (1 + kappa D_c), clamped into [0.10, 0.40], renormalised;
    the total l1 move is capped at 2 * kappa.
    """
    if kappa > gamma_max:
        raise ValueError(f"kappa {kappa} exceeds the gain bound {gamma_max}")
    d = np.array([float(per_domain_divergence.get(dom, per_domain_divergence.get(dom.value, 0.0)))
                  for dom in DOMAINS])
    if np.any(d < 0) or np.any(d > 1):
        raise ValueError("divergences must lie in [0, 1]")
    if not d.any() or kappa == 0:
        return weights
    w = weights.vector()
    new = _clamp_renormalize(w * (1.0 + kappa * d), *WEIGHT_BAND)
    step = float(np.abs(new - w).sum())
    if step > 2 * kappa:
        new = w + (2 * kappa / step) * (new - w)
    new /= new.sum()
    return DomainWeights(dict(zip(DOMAINS, new)), check=False)


def allocate_counts(n: int, weights: DomainWeights) -> dict[MoralDomain, int]:
    """Largest-remainder apportionment of n prompts across domains."""
    raw = n * weights.vector()
    base = np.floor(raw).astype(int)
    rem = raw - base
    order = sorted(range(len(DOMAINS)), key=lambda i: (-rem[i], i))
    for i in order[: n - int(base.sum())]:
        base[i] += 1
    return {d: int(c) for d, c in zip(DOMAINS, base)}


# -- generation -------------------------------------------------------------------

class ScenarioGenerator:
    """Emits unique, entropy-bounded prompts; owns the run's seen-set.

    Single-threaded by design: the seen-set and id counter are serial state.
    """

    def __init__(self, store: TemplateStore | None = None,
                 entropy_ceiling: float = ENTROPY_CEILING,
                 paraphraser: Callable[[str], str] | None = None):
        self.store = store or load_templates()
        self.entropy_ceiling = entropy_ceiling
        self.paraphraser = paraphraser
        self.seen: set[str] = set()
        self.counter = 0

    def _key(self, text: str) -> str:
        return re.sub(r"\s+", " ", text.strip().lower())

    def generate_prompt(self, domain: MoralDomain, cycle: int,
                        rng: np.random.Generator) -> ScenarioPrompt:
        domain = MoralDomain(domain)
        templates = self.store.by_domain.get(domain)
        if not templates:
            raise GenerationError(f"no templates for domain {domain.value}")
        seed = int(rng.integers(0, 2**64, dtype=np.uint64))
        local = np.random.Generator(np.random.Philox(seed))
        duplicates = 0
        for _ in range(MAX_ATTEMPTS):
            tpl = templates[int(local.integers(len(templates)))]
            text = tpl.fill(local)
            if self.paraphraser is not None:
                text = self.paraphraser(text).strip() or text
            text = text[:MAX_PROMPT_CHARS]
            key = self._key(text)
            if key in self.seen:
                duplicates += 1
                continue
            h = lexical_entropy(text)
            if h >= self.entropy_ceiling:
                continue
            self.seen.add(key)
            self.counter += 1
            return ScenarioPrompt(f"p{self.counter:06d}", domain, text, h, cycle, seed)
        if duplicates == 0:
            raise EntropyExhausted(f"{MAX_ATTEMPTS} candidates for {domain.value} broke the entropy bound")
        raise UniquenessExhausted(f"slot space for {domain.value} appears depleted")

    def generate_batch(self, domains: Sequence[MoralDomain], cycle: int,
                       rng: np.random.Generator) -> list[ScenarioPrompt]:
        return [self.generate_prompt(d, cycle, rng) for d in domains]
