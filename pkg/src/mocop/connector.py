"""Interaction layer: paced live chat-completions client and offline simulator.

The simulator draws an (ethics, toxicity, latency) triple per (model, prompt)
from a Gaussian-copula linear model, then writes a synthetic response whose
guard scores land near those targets, so offline runs exercise the full
scoring path.
"""
from __future__ import annotations

import math
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .core import (
    ModelEndpoint,
    ModelResponse,
    RunConfig,
    ScenarioPrompt,
    SimulatorProfile,
    offline_timestamp,
    rng_for,
    utc_iso,
)
from .guard import Guard, semantic_safety, split_sentences, token_bucket, tokenize

__all__ = [
    "ConnectorError", "Timeout", "ProtocolError", "AuthError", "RetriesExhausted",
    "SimulatedFailure", "ModelEndpoint", "SimulatorProfile", "LiveEndpoint",
    "SimulatedEndpoint", "TextSynthesizer", "simulate_response", "draw_targets", "sample_population",
    "make_connector", "query",
]


class ConnectorError(RuntimeError):
    pass


class Timeout(ConnectorError):
    pass


class ProtocolError(ConnectorError):
    pass


class AuthError(ConnectorError):
    pass


class RetriesExhausted(ConnectorError):
    pass


class SimulatedFailure(ConnectorError):
    pass


# -- generative law ---------------------------------------------------------------

def draw_targets(profile: SimulatorProfile, shared_latent, z_private, eps, u_latency):
    """Map standard draws to (E, T, latency); works on scalars or arrays.

    The shared latent loads with sqrt(copula_rho), so two profiles with equal
    copula_rho have ethics scores correlated at copula_rho.
    """
    load = math.sqrt(profile.copula_rho)
    z = load * np.asarray(shared_latent) + math.sqrt(1.0 - profile.copula_rho) * np.asarray(z_private)
    e = np.clip(profile.mu_E + profile.sigma_E * z, 0.0, 1.0)
    t = np.clip(profile.intercept_a - profile.slope_b * e + profile.sigma_eps * np.asarray(eps), 0.0, 1.0)
    lat = profile.latency_low + (profile.latency_high - profile.latency_low) * np.asarray(u_latency)
    return e, t, lat


def _private_draws(profile: SimulatorProfile, rng: np.random.Generator, size=None):
    z = rng.standard_normal(size)
    eps = rng.standard_normal(size)
    u = rng.beta(*profile.latency_skew, size)
    return z, eps, u


def sample_population(profiles: Mapping[str, SimulatorProfile], n: int, seed: int) -> dict:
    """Vectorised draw of n prompts' targets for each profile (shared latent per prompt)."""
    shared = rng_for(seed, "population", "latent").standard_normal(n)
    out = {"shared_latent": shared}
    for model_id, profile in profiles.items():
        z, eps, u = _private_draws(profile, rng_for(seed, "population", model_id), n)
        e, t, lat = draw_targets(profile, shared, z, eps, u)
        out[model_id] = {"E": e, "T": t, "latency": lat}
    return out


# -- text synthesis ------------------------------------------------------------------

_FILLER = """
approach situation context option outcome process decision review plan step
question answer detail factor priority principle framework standard practice guideline
approach schedule timeline meeting discussion dialogue document summary record
evidence reasoning analysis assessment evaluation judgment perspective viewpoint
consideration balance tradeoff alternative pathway sequence method procedure routine
resource budget capacity staff team department office committee panel board council
member participant community neighbor customer client partner supplier vendor
policy rule norm expectation commitment obligation duty role responsibility task
goal objective purpose intention motive rationale basis ground premise conclusion
clarity structure order pattern measure metric indicator signal trend change growth
period phase stage moment interval window horizon future present history tradition
channel message notice update report memo letter note comment feedback input
criteria threshold limit scope boundary margin range level degree extent share
weigh examine compare discuss explain describe outline clarify document record verify
communicate coordinate consult involve include inform notify schedule prepare plan
gradual steady moderate consistent neutral measured practical deliberate thorough
""".split()


class TextSynthesizer:
    """Writes responses whose guard scores track (composite ~ E, tox ~ T)."""

    def __init__(self, guard: Guard, config: RunConfig):
        self.guard = guard
        self.config = config
        lex = guard.lexicons
        self.centroid_buckets = {
            token_bucket(t) for text in lex.centroids.values() for t in tokenize(text)
        }
        self.lexical = set(lex.polarity) | set(lex.harm) | set(lex.bias_markers)
        self.filler = list(dict.fromkeys(
            w for w in _FILLER if w not in self.lexical and token_bucket(w) not in self.centroid_buckets
        ))
        centroid_tokens = {n: set(tokenize(t)) for n, t in lex.centroids.items()}
        in_any = set().union(*centroid_tokens.values())
        severe_first = sorted(lex.harm, key=lambda t: (-lex.harm[t], t))
        self.aligned = {n: [t for t in severe_first if t in toks] for n, toks in centroid_tokens.items()}
        self.off_centroid = [t for t in severe_first
                             if t not in in_any and token_bucket(t) not in self.centroid_buckets]

    def _composite(self, prompt_vec, sentences) -> tuple[float, float]:
        from .guard import cosine, embed_tokens
        tokens = [t for s in sentences for t in s]
        s_lex = self.guard.lexical_integrity_sentences(sentences)
        tox = self.guard.toxicity_tokens(tokens)
        s_rea = cosine(prompt_vec, embed_tokens(tokens))
        s_sem = semantic_safety(tox, self.config.tox_steepness, self.config.rescale_sem)
        w1, w2, w3 = self.config.weights
        return w1 * s_lex + w2 * s_sem + w3 * s_rea, tox

    def synthesize(self, prompt_text: str, domain: str, target_e: float, target_t: float,
                   rng: np.random.Generator) -> str:
        from .guard import embed_tokens
        p_tokens = list(dict.fromkeys(tokenize(prompt_text)))
        p_buckets = {token_bucket(t) for t in p_tokens}
        n = max(len(p_tokens), 8)
        filler = [w for w in self.filler if w not in p_tokens and token_bucket(w) not in p_buckets]
        filler = [filler[i] for i in rng.permutation(len(filler))]
        if len(filler) < n:
            filler = (filler * (n // max(len(filler), 1) + 1))[:n]
        echo = sorted(p_tokens, key=lambda t: (t in self.lexical,
                                               token_bucket(t) in self.centroid_buckets))

        pool = self.aligned.get(domain, []) + self.off_centroid
        prompt_vec = embed_tokens(tokenize(prompt_text))

        def layout(k: int, harm: list[str]) -> list[list[str]]:
            rest = harm + filler[: n - k - len(harm)]
            return [s for s in (echo[:k], rest) if s]

        def fit_harm(k: int) -> list[str]:
            # greedily swap filler for harm tokens while toxicity moves toward the target
            harm: list[str] = []
            best = self.guard.toxicity_tokens(echo[:k] + filler[: n - k])
            while len(harm) < min(n // 2, n - k):
                choice, choice_tox = None, best
                for cand in pool:
                    if cand in harm:
                        continue
                    tokens = echo[:k] + harm + [cand] + filler[: n - k - len(harm) - 1]
                    tox = self.guard.toxicity_tokens(tokens)
                    if abs(tox - target_t) < abs(choice_tox - target_t) - 1e-12:
                        choice, choice_tox = cand, tox
                if choice is None:
                    break
                harm.append(choice)
                best = choice_tox
            return harm

        def fit_echo(harm: list[str]) -> int:
            # echo as much of the prompt as the ethics target needs
            k_max = min(len(echo), n - len(harm))
            lo, hi = 0, k_max
            while lo < hi:
                mid = (lo + hi) // 2
                if self._composite(prompt_vec, layout(mid, harm))[0] < target_e:
                    lo = mid + 1
                else:
                    hi = mid
            return min(range(max(0, lo - 1), min(k_max, lo + 1) + 1),
                       key=lambda j: abs(self._composite(prompt_vec, layout(j, harm))[0] - target_e))

        k = 0
        harm = fit_harm(k)
        for _ in range(3):
            k_next = fit_echo(harm)
            harm = fit_harm(k_next)
            if k_next == k:
                break
            k = k_next
        k = min(k, n - len(harm))
        sentences = layout(k, harm)
        return " ".join(" ".join(s).capitalize() + "." for s in sentences)


def simulate_response(profile: SimulatorProfile, prompt: ScenarioPrompt, shared_latent: float,
                      rng: np.random.Generator, synthesizer: TextSynthesizer | None = None):
    """Return (text, target_E, target_T, latency) for one simulated model."""
    z, eps, u = _private_draws(profile, rng)
    e, t, lat = draw_targets(profile, shared_latent, z, eps, u)
    e, t, lat = float(e), float(t), float(lat)
    synth = synthesizer or _default_synth()
    text = synth.synthesize(prompt.text, prompt.domain.value, e, t, rng)
    return text, e, t, lat


_synth_lock = threading.Lock()
_synth_cache: dict = {}


def _default_synth() -> TextSynthesizer:
    with _synth_lock:
        if "default" not in _synth_cache:
            _synth_cache["default"] = TextSynthesizer(Guard(), RunConfig())
        return _synth_cache["default"]


# -- endpoints ------------------------------------------------------------------------

class SimulatedEndpoint:
    """Deterministic offline model: same (seed, model, prompt) gives the same reply."""

    def __init__(self, endpoint: ModelEndpoint, master_seed: int,
                 synthesizer: TextSynthesizer | None = None):
        if endpoint.profile is None:
            raise ValueError(f"{endpoint.model_id}: simulated endpoint needs a profile")
        self.endpoint = endpoint
        self.profile = endpoint.profile
        self.master_seed = master_seed
        self.synthesizer = synthesizer or _default_synth()
        self._cache: dict[tuple[str, str], tuple] = {}

    @property
    def model_id(self) -> str:
        return self.endpoint.model_id

    def shared_latent(self, prompt: ScenarioPrompt) -> float:
        return float(rng_for(self.master_seed, "latent", prompt.prompt_id, prompt.text).standard_normal())

    def targets(self, prompt: ScenarioPrompt) -> tuple:
        key = (prompt.prompt_id, prompt.text)
        if key not in self._cache:
            rng = rng_for(self.master_seed, "sim", self.model_id, prompt.prompt_id, prompt.text)
            failed = bool(rng.random() < self.profile.failure_rate)
            result = simulate_response(self.profile, prompt, self.shared_latent(prompt), rng,
                                       self.synthesizer)
            self._cache[key] = (failed,) + result
        return self._cache[key]

    def query(self, prompt: ScenarioPrompt, start_time: float = 0.0) -> ModelResponse:
        failed, text, _, _, latency = self.targets(prompt)
        if failed:
            raise SimulatedFailure(f"{self.model_id} declined prompt {prompt.prompt_id}")
        return ModelResponse(prompt.prompt_id, self.model_id, text, latency,
                             offline_timestamp(start_time))


class LiveEndpoint:
    """OpenAI-compatible chat-completions client with per-endpoint pacing.

    Request starts are spaced by a uniform draw from the pacing window, and
    transient failures are retried with exponential backoff.
    """

    def __init__(self, endpoint: ModelEndpoint, pacing: tuple[float, float] = (0.6, 1.0),
                 rng: np.random.Generator | None = None, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 clock: Callable[[], float] = time.monotonic):
        if not endpoint.base_url:
            raise ValueError(f"{endpoint.model_id}: live endpoint needs base_url")
        self.endpoint = endpoint
        self.pacing = pacing
        self.rng = rng or np.random.default_rng()
        self.client = client or httpx.Client(timeout=endpoint.timeout)
        self.sleep = sleep
        self.clock = clock
        self.request_starts: list[float] = []
        self._lock = threading.Lock()

    @property
    def model_id(self) -> str:
        return self.endpoint.model_id

    def _api_key(self) -> str:
        env = self.endpoint.credential_env
        key = os.environ.get(env or "")
        if not key:
            raise AuthError(f"credential variable {env!r} is not set")
        return key

    def _pace(self) -> None:
        if self.request_starts:
            gap = float(self.rng.uniform(*self.pacing))
            wait = self.request_starts[-1] + gap - self.clock()
            if wait > 0:
                self.sleep(wait)
        self.request_starts.append(self.clock())

    def payload(self, prompt: ScenarioPrompt) -> dict:
        return {
            "model": self.endpoint.remote_model or self.endpoint.model_id,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.endpoint.temperature,
            "max_tokens": self.endpoint.max_tokens,
        }

    @staticmethod
    def parse(body) -> str:
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat-completions payload: {exc!r}") from None
        if not isinstance(content, str) or not content:
            raise ProtocolError("chat-completions payload has no text content")
        return content

    def _attempt(self, prompt: ScenarioPrompt, key: str) -> tuple[str, float]:
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        self._pace()
        start = time.perf_counter()
        try:
            resp = self.client.post(url, json=self.payload(prompt), headers=headers,
                                    timeout=self.endpoint.timeout)
        except httpx.TimeoutException as exc:
            raise Timeout(str(exc)) from exc
        latency = time.perf_counter() - start
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code} from {url}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code} from {url}")
        if resp.status_code >= 400:
            raise ProtocolError(f"HTTP {resp.status_code} from {url}")
        try:
            body = resp.json()
        except ValueError:
            raise ProtocolError("response body is not JSON") from None
        return self.parse(body), latency

    def query(self, prompt: ScenarioPrompt) -> ModelResponse:
        key = self._api_key()
        last: Exception | None = None
        with self._lock:
            for attempt in range(self.endpoint.max_retries + 1):
                if attempt:
                    self.sleep(self.endpoint.backoff_base * 2 ** (attempt - 1))
                try:
                    text, latency = self._attempt(prompt, key)
                except (Timeout, _Transient, httpx.TransportError) as exc:
                    last = exc
                    continue
                stamp = utc_iso(_now())
                return ModelResponse(prompt.prompt_id, self.model_id, text, latency, stamp)
        raise RetriesExhausted(
            f"{self.model_id}: {self.endpoint.max_retries + 1} attempts failed; last error: {last!r}"
        )


class _Transient(ConnectorError):
    pass


def _now():
    from datetime import datetime, timezone
    return datetime.now(timezone.utc)


def make_connector(endpoint: ModelEndpoint, config: RunConfig,
                   synthesizer: TextSynthesizer | None = None):
    """Build the connector for an endpoint; ``config.offline`` forces simulation."""
    if endpoint.kind == "simulated" or config.offline:
        return SimulatedEndpoint(endpoint, config.seeds.get("simulator", config.seed), synthesizer)
    rng = rng_for(config.seed, "pacing", endpoint.model_id)
    return LiveEndpoint(endpoint, tuple(config.pacing), rng)


def query(connector, prompt: ScenarioPrompt) -> ModelResponse:
    return connector.query(prompt)
