"""Pluggable chat-completion backends.

Two backends share one interface: an HTTP client speaking the common
chat-completions wire shape, and a deterministic mock that is a pure function
of (request, seed). The mock reads the structured ``metadata`` attached to a
request by pipeline stages; the HTTP backend ignores metadata entirely and
sends only the rendered prompt messages.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import requests

__all__ = [
    "CompletionRequest",
    "RetryPolicy",
    "BackendConfig",
    "Backend",
    "MockBackend",
    "HttpBackend",
    "BackendError",
    "AuthError",
    "BackendTimeout",
    "RetryExhaustedError",
    "make_backend",
]


class BackendError(RuntimeError):
    pass


class AuthError(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class RetryExhaustedError(BackendError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.7
    max_tokens: int = 512
    tag: str = ""
    # structured hints for the mock backend; never sent over the wire
    metadata: Optional[dict] = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be nonempty")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 0.1


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"  # "mock" or "http"
    endpoint: str = ""
    model: str = ""
    auth_env: str = "TODGEN_API_KEY"
    timeout: float = 30.0
    retry: RetryPolicy = RetryPolicy()
    seed: int = 0

    def __post_init__(self):
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http backend requires an endpoint")


class Backend:
    """Base class handling audit logging, accounting, and concurrency cap."""

    def __init__(self, audit_log: Optional[str] = None, max_concurrency: int = 4):
        self._audit_log = audit_log
        self._lock = threading.Lock()
        self._sem = threading.Semaphore(max_concurrency)
        self.call_counts: dict[str, int] = {}
        self.token_counts: dict[str, int] = {}

    def complete(self, req: CompletionRequest) -> str:
        with self._sem:
            text = self._complete(req)
        tokens = sum(len(c.split()) for _, c in req.messages) + len(text.split())
        with self._lock:
            self.call_counts[req.tag] = self.call_counts.get(req.tag, 0) + 1
            self.token_counts[req.tag] = self.token_counts.get(req.tag, 0) + tokens
            if self._audit_log:
                record = {
                    "tag": req.tag,
                    "messages": [list(m) for m in req.messages],
                    "completion": text,
                }
                with open(self._audit_log, "a", encoding="utf-8") as f:
                    f.write(json.dumps(record, ensure_ascii=False) + "\n")
        return text

    def _complete(self, req: CompletionRequest) -> str:
        raise NotImplementedError


class HttpBackend(Backend):
    """Chat-completions HTTP client with bounded retry on transient failures."""

    def __init__(self, config: BackendConfig, **kwargs):
        super().__init__(**kwargs)
        self.config = config
        self.last_attempts = 0

    def _complete(self, req: CompletionRequest) -> str:
        token = os.environ.get(self.config.auth_env, "")
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {
            "model": self.config.model,
            "messages": [{"role": r, "content": c} for r, c in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        policy = self.config.retry
        last_error: Optional[Exception] = None
        for attempt in range(1, policy.max_attempts + 1):
            self.last_attempts = attempt
            try:
                resp = requests.post(
                    self.config.endpoint,
                    json=body,
                    headers=headers,
                    timeout=self.config.timeout,
                )
            except requests.Timeout as e:
                last_error = BackendTimeout(str(e))
            except requests.RequestException as e:
                last_error = BackendError(str(e))
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"authentication failed ({resp.status_code})")
                if resp.status_code >= 500:
                    last_error = BackendError(f"server error {resp.status_code}")
                elif resp.status_code != 200:
                    raise BackendError(f"unexpected status {resp.status_code}")
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError) as e:
                        raise BackendError(f"malformed response body: {e}") from e
            if attempt < policy.max_attempts:
                time.sleep(policy.backoff * attempt)
        raise RetryExhaustedError(str(last_error), policy.max_attempts)


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

_FIRST_NAMES = [
    "Alex", "Maria", "James", "Wei", "Priya", "Omar", "Elena", "David",
    "Aisha", "Carlos", "Yuki", "Fatima", "Liam", "Sofia", "Noah", "Amara",
]
_EVENT_NAMES = [
    "Art Class", "Team Standup", "Dentist Appointment", "Yoga Session",
    "Book Club", "Project Review", "Piano Lesson", "Soccer Practice",
]
_ALARM_NAMES = [
    "Morning Workout", "Family Dinner", "Wake Up", "Medication",
    "School Run", "Evening Walk",
]
_REMINDER_CONTENTS = [
    "water the plants", "call the dentist", "submit the report",
    "buy groceries", "renew the car insurance", "pick up the laundry",
]
_MESSAGE_CONTENTS = [
    "See you at noon", "Running late, sorry", "Happy birthday!",
    "Meeting moved to Friday", "Can you call me back?", "Dinner at our place?",
]
_MOVIE_TITLES = [
    "Joker", "Dune", "Inside Out", "The Batman", "Oppenheimer", "Up",
]
_PLACES = [
    "Las Vegas", "Houston", "Miami", "Seattle", "Denver", "Chicago",
    "Boston", "Austin",
]
_VENUES = [
    "Regal Cinemas", "French Brasserie", "Grand Plaza Hotel", "AMC Downtown",
    "Blue Ribbon Diner", "Lakeside Inn",
]
_DURATIONS = ["30 minutes", "1 hour", "1.5 hours", "2 hours"]
_AFFILIATIONS = [
    "Northside Clinic", "Crestview Logistics", "Bluefield University",
    "Harbor Analytics", "Summit Retail Group", "Maple Grove School District",
]
_JOB_LEVELS = ["senior", "intermediate", "entry-level", "not-specified"]
_HOBBIES = ["hiking", "photography", "cooking", "gardening", "chess", "cycling"]

_WEEKDAYS = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"]


def format_date(d: dt.date) -> str:
    """Display form with weekday, e.g. 'Wed 2025-04-16'."""
    return f"{_WEEKDAYS[d.weekday()]} {d.isoformat()}"


def _parse_today(metadata: dict) -> dt.date:
    today = (metadata or {}).get("today", "")
    iso = today.split()[-1] if today else "2025-04-16"
    try:
        return dt.date.fromisoformat(iso)
    except ValueError:
        return dt.date(2025, 4, 16)


def _mock_value(rng: random.Random, slot: str, potential_values, today: dt.date,
                names: Optional[list] = None):
    """Deterministic plausible value for a slot, keyed off its name."""
    if potential_values:
        return rng.choice(list(potential_values))
    s = slot.lower()
    if s in ("attendees", "recipient", "sender") and names:
        return rng.choice(names)
    if "date" in s:
        return format_date(today + dt.timedelta(days=rng.randint(1, 14)))
    if "duration" in s:
        return rng.choice(_DURATIONS)
    if "time" in s:
        return f"{rng.randint(6, 21):02d}:{rng.choice(['00', '15', '30', '45'])}"
    if s in ("ticket_quantity", "party_size"):
        return rng.randint(1, 4)
    if s == "amount":
        return rng.randint(10, 500)
    if s in ("price",):
        return rng.randint(80, 400)
    if s in ("balance",):
        return rng.randint(100, 9000)
    if s in ("rating",):
        return f"{rng.randint(30, 50) / 10:.1f}"
    if "phone" in s:
        return f"555-{rng.randint(1000, 9999)}"
    if "email" in s:
        name = rng.choice(names or _FIRST_NAMES).split()[0].lower()
        return f"{name}@example.com"
    if s in ("movie_name",):
        return rng.choice(_MOVIE_TITLES)
    if s in ("cinema_name",):
        return rng.choice(["Regal Cinemas", "AMC Downtown", "Cineworld Plaza"])
    if s in ("restaurant",):
        return rng.choice(["French Brasserie", "Blue Ribbon Diner", "Casa Verde"])
    if s in ("hotel_name",):
        return rng.choice(["Grand Plaza Hotel", "Lakeside Inn", "Harborview Suites"])
    if s in ("location", "home_space"):
        return rng.choice(_PLACES)
    if s == "content":
        return rng.choice(_REMINDER_CONTENTS + _MESSAGE_CONTENTS)
    if s == "name" and names:
        return rng.choice(names)
    if s == "name":
        return rng.choice(_EVENT_NAMES + _ALARM_NAMES)
    if "condition" in s or s == "weather":
        return rng.choice(["sunny", "cloudy", "light rain", "snow", "windy"])
    if s == "temperature":
        return f"{rng.randint(30, 90)}F"
    if s == "status":
        return rng.choice(["on", "off", "idle"])
    if s == "if_repeat":
        return rng.choice(["True", "False"])
    return rng.choice(_EVENT_NAMES)


def _words(text: str) -> int:
    return len(text.split())


def _verbalize_value(v) -> str:
    return str(v)


class MockBackend(Backend):
    """Deterministic completion generator, a pure function of (request, seed).

    Output format per request tag matches what the corresponding pipeline
    stage parses from a real model, so mock and HTTP runs share code paths.
    """

    def __init__(self, seed: int = 0, **kwargs):
        super().__init__(**kwargs)
        self.seed = seed

    def _rng(self, req: CompletionRequest) -> random.Random:
        canon = json.dumps(
            {
                "seed": self.seed,
                "tag": req.tag,
                "metadata": req.metadata,
                "messages": [list(m) for m in req.messages],
            },
            sort_keys=True,
            ensure_ascii=False,
            default=str,
        )
        digest = hashlib.sha256(canon.encode("utf-8")).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def _complete(self, req: CompletionRequest) -> str:
        rng = self._rng(req)
        meta = req.metadata or {}
        handler = _MOCK_HANDLERS.get(req.tag.split(":")[0], _mock_fallback)
        return handler(rng, meta, req)


def _mock_fallback(rng, meta, req) -> str:
    return "OK."


def _mock_persona_details(rng, meta, req) -> str:
    return json.dumps(
        {
            "location": rng.choice(_PLACES),
            "affiliation": rng.choice(_AFFILIATIONS),
            "job_level": rng.choice(_JOB_LEVELS),
        }
    )


def _mock_persona_intro(rng, meta, req) -> str:
    surname = meta.get("surname", "Doe")
    first = meta.get("first_name") or rng.choice(_FIRST_NAMES)
    status = meta.get("work_status", "employed")
    occupation = meta.get("occupation_title", "")
    hobby = rng.choice(_HOBBIES)
    if status == "employed" and occupation:
        work = f"works as a {occupation.lower()}"
    elif status == "student":
        work = f"is a student studying {occupation.lower() or 'general studies'}"
    else:
        work = "is retired"
    intro = (
        f"{first} {surname} {work} and lives in {rng.choice(_PLACES)}. "
        f"{first} enjoys {hobby} on weekends and keeps a busy schedule "
        f"organized with a phone assistant."
    )
    return json.dumps({"first_name": first, "introduction": intro})


def _mock_context(rng, meta, req) -> str:
    today = _parse_today(meta)
    slots = meta.get("record_slots", [])
    count = meta.get("count", 2)
    names = meta.get("contact_names") or None
    if names is None and meta.get("service") == "contacts":
        names = _FIRST_NAMES
    potential = meta.get("potential_values", {})
    records = []
    for _ in range(count):
        record = {
            slot: _mock_value(rng, slot, potential.get(slot, []), today, names)
            for slot in slots
        }
        records.append(record)
    return json.dumps(records, ensure_ascii=False)


def _mock_slot_values(rng, meta, req) -> str:
    today = _parse_today(meta)
    names = meta.get("contact_names") or None
    out = {}
    for spec in meta.get("slots", []):
        key = f"{spec['service']}.{spec['intent']}.{spec['slot']}"
        out[key] = _mock_value(
            rng, spec["slot"], spec.get("potential_values", []), today, names
        )
    return json.dumps(out, ensure_ascii=False)


def _mock_db_query(rng, meta, req) -> str:
    today = _parse_today(meta)
    inputs = meta.get("input_values", {})
    result_slots = meta.get("result_slots", [])
    records = []
    for _ in range(5):
        record = dict(inputs)
        for slot in result_slots:
            if slot not in record:
                record[slot] = _mock_value(rng, slot, [], today)
        records.append(record)
    return json.dumps(records, ensure_ascii=False)


def _mock_user_turn(rng, meta, req) -> str:
    """Deterministic user message templated from per-action head + values."""
    parts = []
    for act in meta.get("action_info", []):
        head = act.get("head", "")
        base = head.split("_", 1)[-1] if "_" in head else head
        values = [str(v) for v in act.get("values", [])]
        detail = ", ".join(values)
        if head == "hello":
            parts.append("Hi.")
        elif head.endswith("confirm") and not values:
            parts.append("Yes, that's correct.")
        elif head.endswith("inform_information"):
            parts.append(f"It's {detail}." if detail else "As I said.")
        else:
            verb = head.replace("_", " ")
            parts.append(
                f"I'd like to {verb}" + (f" with {detail}, please." if detail
                                         else ", please.")
            )
        if act.get("correction_new") is not None:
            parts.append(f"Actually, make that {act['correction_new']} instead.")
    message = " ".join(parts) if parts else "Okay."
    return json.dumps(
        {"actions": meta.get("actions", []), "message": message},
        ensure_ascii=False,
    )


def _mock_system_turn(rng, meta, req) -> str:
    """Six style variants with strictly increasing word counts low<mid<high.

    ``action_info`` lists one entry per action in the turn; each contributes a
    sentence to every variant.
    """
    last_user = meta.get("last_user_utterance", "")
    mirror_phrase = ""
    if last_user:
        # mirror noun/verb wording only; never echo raw dates or times
        tokens = [
            t.strip(".,!?\"'")
            for t in last_user.split()
            if not any(c.isdigit() for c in t)
        ]
        mirror_phrase = " ".join(tokens[-3:])

    lows, mids, highs = [], [], []
    for act in meta.get("action_info", [{}]):
        low, mid, high = _mock_system_sentences(act)
        lows.append(low)
        mids.append(mid)
        highs.append(high)
    low, mid, high = " ".join(lows), " ".join(mids), " ".join(highs)

    # enforce strict word-count ordering low < mid < high
    while _words(mid) <= _words(low):
        mid += " indeed"
    while _words(high) <= _words(mid):
        high += " Thank you."

    def mirrored(text: str) -> str:
        if mirror_phrase:
            return f"{text[:-1]}, regarding \"{mirror_phrase}\"."
        return text

    return json.dumps(
        {
            "verbosity_low mirroring": mirrored(low) if mirror_phrase else low,
            "verbosity_low no_mirroring": low,
            "verbosity_mid mirroring": mirrored(mid),
            "verbosity_mid no_mirroring": mid,
            "verbosity_high mirroring": mirrored(high),
            "verbosity_high no_mirroring": high,
        },
        ensure_ascii=False,
    )


def _mock_system_sentences(act: dict) -> tuple[str, str, str]:
    values = [str(v) for v in act.get("values", [])]
    head = act.get("head", "notify_done")
    detail = "; ".join(values)
    if head.endswith("request_information"):
        slot = act.get("requested_slot", "that")
        low = f"{slot.replace('_', ' ').capitalize()}?"
        mid = f"Could you tell me the {slot.replace('_', ' ')} you would prefer?"
        high = (
            f"To continue, could you please tell me which "
            f"{slot.replace('_', ' ')} you would like for this request?"
        )
    elif head.endswith("ask_confirm"):
        low = "Confirm?"
        mid = "Can you confirm that you want me to go ahead with it?"
        high = (
            f"Please confirm that you want to proceed with the following "
            f"details: {detail}. Is that correct?"
            if detail
            else "Please confirm that you want me to proceed with this "
            "operation as requested. Is that correct?"
        )
    elif head.endswith(("inform_result", "summary")):
        low = "Here it is."
        mid = "Here is what I found for that request of yours."
        high = (
            f"Here is the information you asked for: {detail}."
            if detail
            else "Here is the full information you asked for in your request."
        )
    elif head.endswith("notify_done"):
        low = "Done."
        mid = "I have completed that operation for you now."
        high = (
            f"All done. I have completed the operation with these details: "
            f"{detail}."
            if detail
            else "All done. I have completed the requested operation for you "
            "successfully."
        )
    elif head.endswith("offer_help"):
        low = "How can I help?"
        mid = "Hello there, how can I help you out today?"
        high = (
            "Hello! I am your assistant and I am ready to help you with "
            "whatever you need today."
        )
    else:
        low = "Okay."
        mid = "Alright, I have taken note of that for you."
        high = (
            f"Alright, I have noted everything you mentioned: {detail}."
            if detail
            else "Alright, I have carefully noted everything that you have "
            "mentioned so far."
        )
    return low, mid, high


def _normalize_for_match(text: str) -> str:
    return "".join(c for c in text.lower() if c.isalnum() or c.isspace())


def _mock_qc_eval(rng, meta, req) -> str:
    """Rule-based consistency: every action literal must appear in its
    utterance (case-insensitive, punctuation-stripped)."""
    for pair in meta.get("pairs", []):
        utterance = _normalize_for_match(pair.get("utterance", ""))
        for value in pair.get("values", []):
            if _normalize_for_match(str(value)) not in utterance:
                return (
                    f"inconsistent: value {value!r} from the actions does not "
                    f"appear in the corresponding utterance"
                )
    return "consistent"


_MOCK_HANDLERS: dict[str, Callable] = {
    "persona_details": _mock_persona_details,
    "persona_intro": _mock_persona_intro,
    "context": _mock_context,
    "slot_values": _mock_slot_values,
    "db_query": _mock_db_query,
    "user_turn": _mock_user_turn,
    "system_turn": _mock_system_turn,
    "qc_eval": _mock_qc_eval,
}


def make_backend(config: BackendConfig, audit_log: Optional[str] = None,
                 max_concurrency: int = 4) -> Backend:
    if config.kind == "mock":
        return MockBackend(
            seed=config.seed, audit_log=audit_log, max_concurrency=max_concurrency
        )
    if config.kind == "http":
        return HttpBackend(
            config, audit_log=audit_log, max_concurrency=max_concurrency
        )
    raise ValueError(f"unknown backend kind {config.kind!r}")
