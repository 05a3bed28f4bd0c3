"""Deterministic discrete-event network with pluggable delays and fault profiles.

Time is an abstract tick counter.  Events are ordered by (tick, insertion
sequence), so equal seeds and configs replay identically.
"""
from __future__ import annotations

import heapq
import logging
import random
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

from .broadcast import BROADCAST_KINDS

log = logging.getLogger(__name__)

ADVERSARIAL_POLICIES = ("starve-rotating-minority", "split-first-round")
BEHAVIORS = ("crash", "withhold", "max_delay", "equivocate_attempt",
             "invalid_attestation", "vote_starved_leader")


class Actor(Protocol):
    def on_message(self, src: int, payload: bytes) -> None: ...


@dataclass
class Envelope:
    src: int
    dst: int
    payload: bytes
    send_time: int
    deliver_time: int = 0


def vertex_slot(payload: bytes) -> tuple[int, int] | None:
    """(round, source) of the vertex carried by a broadcast message, if any.

    Reads the fixed header only: kind, sender, body length, magic, round, source.
    """
    if len(payload) < 25 or payload[0] not in BROADCAST_KINDS:
        return None
    rnd, src = struct.unpack_from(">QI", payload, 13)
    return rnd, src


class DelayModel:
    kind = "base"

    def delay(self, env: Envelope) -> int:
        raise NotImplementedError


@dataclass
class FixedDelay(DelayModel):
    ticks: int = 5
    kind = "fixed"

    def delay(self, env: Envelope) -> int:
        return self.ticks


class UniformDelay(DelayModel):
    kind = "uniform"

    def __init__(self, lo: int, hi: int, rng: random.Random):
        if not 0 <= lo <= hi:
            raise ValueError(f"bad uniform bounds {lo}..{hi}")
        self.lo, self.hi, self.rng = lo, hi, rng

    def delay(self, env: Envelope) -> int:
        return self.rng.randint(self.lo, self.hi)


class AdversarialDelay(DelayModel):
    """Content-aware scheduler that never looks at enclave state.

    ``starve-rotating-minority``: the vertices of round r from the rotating
    set {(r + i) mod n : 0 <= i <= f} travel fast, all others slowly.
    ``split-first-round``: in the first round of each wave every destination
    d gets its own fast set {(r + d + i) mod n}; other rounds as above.
    Messages that carry no vertex get the fast uniform delay.
    """

    kind = "adversarial"

    def __init__(self, policy: str, n: int, f: int, rounds_per_wave: int, rng: random.Random,
                 fast: tuple[int, int] = (1, 10), slow: int = 200):
        if policy not in ADVERSARIAL_POLICIES:
            raise ValueError(f"unknown adversarial policy {policy!r}")
        self.policy, self.n, self.f, self.W = policy, n, f, rounds_per_wave
        self.rng, self.fast, self.slow = rng, fast, slow

    def fast_set(self, rnd: int, dst: int) -> frozenset[int]:
        base = rnd
        if self.policy == "split-first-round" and (rnd - 1) % self.W == 0:
            base = rnd + dst
        return frozenset((base + i) % self.n for i in range(self.f + 1))

    def delay(self, env: Envelope) -> int:
        slot = vertex_slot(env.payload)
        if slot is not None and env.dst < self.n:
            rnd, source = slot
            if source not in self.fast_set(rnd, env.dst):
                return self.slow
        return self.rng.randint(*self.fast)


def adversarial_policy(model: AdversarialDelay, pending: list[Envelope]) -> list[Envelope]:
    """Order in which ``model`` would deliver ``pending`` envelopes."""
    keyed = [(env.send_time + model.delay(env), i, env) for i, env in enumerate(pending)]
    keyed.sort(key=lambda t: (t[0], t[1]))
    return [env for _, _, env in keyed]


@dataclass(frozen=True)
class FaultProfile:
    replica: int
    behavior: str
    at_tick: int = 0
    targets: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.behavior!r}")

    def describe(self) -> str:
        if self.behavior == "crash":
            return f"crash@{self.at_tick}"
        if self.behavior == "withhold":
            return "withhold:" + "+".join(str(t) for t in sorted(self.targets))
        return self.behavior


@dataclass
class RunReport:
    events: int = 0
    envelopes_sent: int = 0
    envelopes_delivered: int = 0
    dropped_to_crashed: int = 0
    withheld: int = 0
    timers: int = 0
    first_tick: int = 0
    last_tick: int = 0
    quiescent: bool = False
    budget_exhausted: bool = False
    wave_commits: list[int] = field(default_factory=list)

    @property
    def tick_span(self) -> int:
        return self.last_tick - self.first_tick

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tick_span"] = self.tick_span
        return d


class Simulator:
    def __init__(self, delay_model: DelayModel, slow_delay: int = 200):
        self.delay_model = delay_model
        self.slow_delay = slow_delay
        self.now = 0
        self.actors: dict[int, Actor] = {}
        self.crash_at: dict[int, int] = {}
        self.send_filters: dict[int, Callable[[Envelope], bool]] = {}
        self.delay_overrides: dict[int, Callable[[Envelope], int | None]] = {}
        self.send_hooks: list[Callable[[Envelope], None]] = []
        self.report = RunReport()
        self._queue: list[tuple[int, int, object]] = []
        self._seq = 0

    def add_actor(self, actor_id: int, actor: Actor) -> None:
        self.actors[actor_id] = actor

    def crashed(self, actor_id: int) -> bool:
        at = self.crash_at.get(actor_id)
        return at is not None and self.now >= at

    def send(self, src: int, dst: int, payload: bytes) -> None:
        if self.crashed(src):
            return
        env = Envelope(src, dst, payload, self.now)
        filt = self.send_filters.get(src)
        if filt is not None and not filt(env):
            self.report.withheld += 1
            return
        for hook in self.send_hooks:
            hook(env)
        self.schedule(env)

    def schedule(self, env: Envelope) -> None:
        delay = None
        override = self.delay_overrides.get(env.src)
        if override is not None:
            delay = override(env)
        if delay is None:
            delay = self.delay_model.delay(env)
        env.deliver_time = env.send_time + max(0, delay)
        self.report.envelopes_sent += 1
        self._push(env.deliver_time, env)

    def call_at(self, tick: int, actor_id: int, fn: Callable[[], None]) -> None:
        self._push(max(tick, self.now), (actor_id, fn))

    def _push(self, tick: int, item: object) -> None:
        heapq.heappush(self._queue, (tick, self._seq, item))
        self._seq += 1

    @property
    def pending(self) -> int:
        return len(self._queue)

    def step(self):
        if not self._queue:
            return None
        tick, _, item = heapq.heappop(self._queue)
        self.now = tick
        self.report.events += 1
        self.report.last_tick = tick
        if isinstance(item, Envelope):
            if self.crashed(item.dst):
                self.report.dropped_to_crashed += 1
                return item
            self.report.envelopes_delivered += 1
            self.actors[item.dst].on_message(item.src, item.payload)
        else:
            actor_id, fn = item
            if not self.crashed(actor_id):
                self.report.timers += 1
                fn()
        return item

    def run_until_quiescent(self, max_events: int = 10_000_000,
                            on_event: Callable[[int], None] | None = None) -> RunReport:
        rep = self.report
        rep.first_tick = self.now
        budget = max_events
        while self._queue and budget > 0:
            self.step()
            budget -= 1
            if on_event is not None:
                on_event(rep.events)
        rep.quiescent = not self._queue
        rep.budget_exhausted = bool(self._queue)
        return rep
