"""LLM-backed signal controller.

A prompt describing one intersection is sent to a chat-completions style
backend; the reply must end its analysis with ``<signal>CODE</signal>``.
"""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .policies import maxpressure_decide
from .sim import GOVERNED_LANES, PHASE_LANES, Movement, ObservationState, Phase

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.1
API_KEY_ENV = "SIGNALVOTE_LLM_API_KEY"
BASE_URL_ENV = "SIGNALVOTE_LLM_BASE_URL"

_APPROACH_NAMES = {"N": "north", "S": "south", "E": "east", "W": "west"}
_PHASE_GROUPS = {
    Phase.ETWT: "Eastern and western lanes for through traffic",
    Phase.NTST: "Northern and southern lanes for through traffic",
    Phase.ELWL: "Eastern and western lanes for left-turns",
    Phase.NLSL: "Northern and southern lanes for left-turns",
}
# signals are listed through-first in the prompt, mirroring how lanes are introduced
PROMPT_SIGNAL_ORDER = (Phase.ETWT, Phase.NTST, Phase.ELWL, Phase.NLSL)

PROMPT_HEAD = (
    "A traffic light regulates a four-section intersection with northern, southern, eastern, "
    "and western sections, each containing two lanes: one for through traffic and one for "
    "left-turns. Each lane is further divided into three segments. Segment 1 is the closest "
    "to the intersection. Segment 2 is in the middle. Segment 3 is the farthest. In a lane, "
    "there may be early queued vehicles and approaching vehicles traveling in different "
    "segments. Early queued vehicles have arrived at the intersection and await passage "
    "permission. Approaching vehicles will arrive at the intersection in the future. The "
    "traffic light has 4 signal phases. Each signal relieves vehicles' flow in the group of "
    "two specific lanes. The state of the intersection is listed below. It describes:\n"
    "\n"
    "- The group of lanes relieving vehicles' flow under each signal phase.\n"
    "\n"
    "- The number of early queued vehicles of the allowed lanes of each signal.\n"
    "\n"
    "- The number of approaching vehicles in different segments of the allowed lanes of each "
    "signal.\n"
    "\n"
)
PROMPT_TAIL = (
    "\n"
    "Please answer:\n"
    "Which is the most effective traffic signal that will most significantly improve the "
    "traffic condition during the next phase?\n"
    "Requirements:\n"
    "\n"
    "- Let's think step by step.\n"
    "\n"
    "- You can only choose one of the signals listed above.\n"
    "\n"
    "- You must follow the following steps to provide your analysis: \n"
    "\n"
    "Step 1: Provide your analysis for identifying the optimal traffic signal.\n"
    "\n"
    "Step 2: Answer your chosen signal.\n"
    "\n"
    "- Your choice can only be given after finishing the analysis.\n"
    "\n"
    "- Your choice must be identified by the tag: <signal>YOUR_CHOICE</signal>.\n"
)

_SIGNAL_RE = re.compile(r"<signal>(.*?)</signal>", re.IGNORECASE | re.DOTALL)


class ParseError(ValueError):
    pass


class BackendError(RuntimeError):
    pass


class BackendTimeout(BackendError):
    pass


def _lane_index(approach: str, movement: Movement) -> int:
    return GOVERNED_LANES.index((approach, movement))


def render_state(obs: ObservationState) -> str:
    """State block inserted between the fixed head and tail of the prompt."""
    lines = []
    for phase in PROMPT_SIGNAL_ORDER:
        lanes = PHASE_LANES[phase]
        idx = [_lane_index(a, m) for a, m in lanes]
        names = [_APPROACH_NAMES[a] for a, _ in lanes]
        queued = [obs.queued_per_lane[i] for i in idx]
        lines.append(f"Signal: {phase.code}")
        lines.append(f"Allowed lanes: {_PHASE_GROUPS[phase]}")
        lines.append(f"- Early queued: {_counts(queued, names)}")
        for seg in range(3):
            counts = [obs.approaching_per_lane_per_segment[i][seg] for i in idx]
            lines.append(f"- Segment {seg + 1}: {_counts(counts, names)}")
        lines.append("")
    lines.append(f"Current signal: {obs.current_phase.code}")
    return "\n".join(lines) + "\n"


def _counts(values, names) -> str:
    parts = [f"{v} ({n})" for v, n in zip(values, names)]
    return ", ".join(parts) + f", {sum(values)} (total)"


def build_prompt(obs: ObservationState) -> str:
    return PROMPT_HEAD + render_state(obs) + PROMPT_TAIL


def parse_signal(raw: str) -> Phase:
    """Phase named by the last ``<signal>`` tag in ``raw``."""
    tags = _SIGNAL_RE.findall(raw or "")
    if not tags:
        raise ParseError("no <signal> tag in response")
    code = tags[-1].strip()
    try:
        return Phase.from_code(code)
    except ValueError:
        raise ParseError(f"unknown signal code {code!r}") from None


@dataclass
class LLMRequest:
    messages: list[dict]
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = 1024
    model: str = "default"
    timeout: float = 60.0
    # available to in-process mock backends only; never sent over the wire
    observation: ObservationState | None = field(default=None, repr=False)

    def payload(self) -> dict:
        return {
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass
class LLMResponse:
    raw: str
    phase: Phase | None
    latency: float


class Backend(Protocol):
    def complete(self, request: LLMRequest) -> str: ...


class ChatCompletionsBackend:
    """POSTs to ``{base_url}/chat/completions`` and returns the first choice's content."""

    def __init__(self, base_url: str | None = None, model: str = "default",
                 api_key: str | None = None, timeout: float = 60.0, transport=None):
        import httpx

        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "")).rstrip("/")
        if not self.base_url:
            raise BackendError(f"no LLM endpoint configured (set {BASE_URL_ENV})")
        self.model = model
        self.timeout = timeout
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)
        self._httpx = httpx

    def complete(self, request: LLMRequest) -> str:
        body = request.payload()
        if body["model"] == "default":
            body["model"] = self.model
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body,
                                     timeout=request.timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except self._httpx.TimeoutException as exc:
            raise BackendTimeout(str(exc)) from exc
        except (self._httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise BackendError(str(exc)) from exc


def _answer(phase: Phase, note: str = "") -> str:
    return (f"Step 1: {note or 'Compared queued and approaching vehicles per signal.'}\n"
            f"Step 2: <signal>{phase.code}</signal>")


class MockBackend:
    """Deterministic stand-in: answers with the max-pressure phase of the request's observation."""

    def complete(self, request: LLMRequest) -> str:
        if request.observation is None:
            raise BackendError("mock backend needs the request observation")
        return _answer(maxpressure_decide(request.observation.phase_pressures))


class StochasticMockBackend:
    """Max-pressure answers, replaced with a uniformly drawn wrong phase at ``error_rate``."""

    def __init__(self, error_rate: float = 0.2, seed: int = 0):
        if not 0 <= error_rate <= 1:
            raise ValueError("error_rate must lie in [0, 1]")
        self.error_rate = error_rate
        self.rng = np.random.default_rng(seed)

    def complete(self, request: LLMRequest) -> str:
        if request.observation is None:
            raise BackendError("mock backend needs the request observation")
        best = maxpressure_decide(request.observation.phase_pressures)
        wrong = self.rng.random() < self.error_rate
        offset = int(self.rng.integers(1, len(Phase)))
        if wrong:
            return _answer(Phase((best + offset) % len(Phase)), "Picked a signal.")
        return _answer(best)


class ScriptedBackend:
    """Replays a fixed list of replies; an exception instance in the list is raised instead."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def complete(self, request: LLMRequest) -> str:
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        if isinstance(reply, BaseException):
            raise reply
        return reply


def make_request(obs: ObservationState, temperature: float = DEFAULT_TEMPERATURE,
                 model: str = "default", max_tokens: int = 1024, timeout: float = 60.0) -> LLMRequest:
    return LLMRequest(
        messages=[{"role": "user", "content": build_prompt(obs)}],
        temperature=temperature,
        model=model,
        max_tokens=max_tokens,
        timeout=timeout,
        observation=obs,
    )


def decide_with_fallback(backend: Backend, obs: ObservationState, retries: int = 2,
                         request: LLMRequest | None = None,
                         responses: list[LLMResponse] | None = None) -> tuple[Phase, str]:
    """Ask the backend, retrying ``retries`` times; fall back to max-pressure.

    Provenance is ``"llm"``, ``"llm-retry-<n>"`` or ``"fallback"``. Every
    attempt that produced text is appended to ``responses`` when given.
    """
    request = request or make_request(obs)
    for attempt in range(retries + 1):
        t0 = time.perf_counter()
        raw = None
        try:
            raw = backend.complete(request)
            phase = parse_signal(raw)
        except (ParseError, BackendError) as exc:
            logger.debug("intersection %s attempt %d failed: %s", obs.intersection_id, attempt, exc)
            if responses is not None and raw is not None:
                responses.append(LLMResponse(raw, None, time.perf_counter() - t0))
            continue
        if responses is not None:
            responses.append(LLMResponse(raw, phase, time.perf_counter() - t0))
        return phase, ("llm" if attempt == 0 else f"llm-retry-{attempt}")
    return maxpressure_decide(obs.phase_pressures), "fallback"


class LLMAgent:
    name = "llm"

    def __init__(self, backend: Backend, retries: int = 2, temperature: float = DEFAULT_TEMPERATURE,
                 model: str = "default", max_tokens: int = 1024, timeout: float = 60.0):
        self.backend = backend
        self.retries = retries
        self.temperature = temperature
        self.model = model
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.provenance: list[str] = []
        self.responses: list[LLMResponse] = []
        self.keep_responses = False

    @property
    def is_deterministic(self) -> bool:
        return isinstance(self.backend, MockBackend)

    def decide(self, state: ObservationState) -> Phase:
        req = make_request(state, self.temperature, self.model, self.max_tokens, self.timeout)
        phase, prov = decide_with_fallback(self.backend, state, self.retries, req,
                                           self.responses if self.keep_responses else None)
        self.provenance.append(prov)
        return phase

    @property
    def non_llm_count(self) -> int:
        """Decisions that needed a retry or fell back to max-pressure."""
        return sum(p != "llm" for p in self.provenance)

    def reset(self) -> None:
        self.provenance.clear()
        self.responses.clear()
