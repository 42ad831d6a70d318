"""Persona-grounded app-context generation.

Contexts are produced in a fixed dependency order (contacts first) so that
generated contact names can be reused as message senders and event attendees.
"""

from __future__ import annotations

import datetime as dt
import json
import random
from dataclasses import dataclass, field

from .config import (
    CONTACT_DEPENDENT,
    CONTEXT_RECORD_SLOTS,
    CONTEXT_SERVICE_ORDER,
    PipelineConfig,
)
from .llm import Backend, CompletionRequest, format_date
from .persona import Persona, _parse_json_object
from .schema import SchemaSet

__all__ = [
    "AppContext",
    "ContextError",
    "sample_current_time",
    "generate_contexts",
    "context_services",
]


class ContextError(ValueError):
    pass


@dataclass
class AppContext:
    service_name: str
    today: str  # display form, e.g. "Wed 2025-04-16"
    time: str  # 24h "HH:MM"
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "service_name": self.service_name,
            "today": self.today,
            "time": self.time,
            "records": self.records,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AppContext":
        return cls(
            service_name=d["service_name"],
            today=d["today"],
            time=d["time"],
            records=list(d.get("records", [])),
        )


def sample_current_time(
    rng: random.Random, window: tuple[str, str] = ("2025-01-01", "2026-12-31")
) -> dt.datetime:
    """Uniform datetime in the window; the weekday is always derived from the
    date, never sampled."""
    start = dt.date.fromisoformat(window[0])
    end = dt.date.fromisoformat(window[1])
    day = start + dt.timedelta(days=rng.randint(0, (end - start).days))
    return dt.datetime(
        day.year, day.month, day.day, rng.randint(7, 22), rng.choice((0, 15, 30, 45))
    )


def context_services(schemas: SchemaSet) -> tuple[str, ...]:
    """Context-bearing services present in the active set, dependency order."""
    return tuple(s for s in CONTEXT_SERVICE_ORDER if schemas.has_service(s))


def _validate_records(records, slots: tuple[str, ...], allowed_keys: set,
                      count: int, names: list) -> str:
    if not isinstance(records, list) or len(records) != count:
        return f"expected {count} records"
    for r in records:
        if not isinstance(r, dict):
            return "record is not an object"
        if set(r) - allowed_keys:
            return f"unknown record key {sorted(set(r) - allowed_keys)[0]!r}"
        for slot in slots:
            if slot not in r:
                return f"record missing slot {slot!r}"
    if names:
        for r in records:
            for key in ("sender", "attendees", "recipient"):
                if key in r and str(r[key]) not in names:
                    return f"{key} {r[key]!r} not in contacts"
    return ""


def generate_contexts(
    persona: Persona,
    schemas: SchemaSet,
    now: dt.datetime,
    llm: Backend,
    config: PipelineConfig,
    rng: random.Random,
) -> dict[str, AppContext]:
    """Generate one AppContext per context-bearing service in the set."""
    today = format_date(now.date())
    clock = f"{now.hour:02d}:{now.minute:02d}"
    contexts: dict[str, AppContext] = {}
    contact_names: list[str] = []
    for service in context_services(schemas):
        svc = schemas.service(service)
        record_slots = tuple(
            s for s in CONTEXT_RECORD_SLOTS.get(service, ()) if svc.has_slot(s)
        )
        lo, hi = config.record_count(service)
        count = rng.randint(lo, hi)
        names = contact_names if service in CONTACT_DEPENDENT else []
        potential = {
            s.name: list(s.potential_values) for s in svc.slots if s.potential_values
        }
        prompt = (
            f"Generate {count} realistic {service} records as a JSON array of "
            f"objects with keys {list(record_slots)} for this user. "
            f"Persona: {persona.introduction} Today is {today}."
            + (f" Known contacts: {names}." if names else "")
        )
        last_problem = ""
        for attempt in range(config.content_retries):
            completion = llm.complete(
                CompletionRequest(
                    messages=(("user", prompt),),
                    tag="context",
                    metadata={
                        "service": service,
                        "record_slots": list(record_slots),
                        "count": count,
                        "today": today,
                        "contact_names": names,
                        "potential_values": potential,
                        "persona": persona.id,
                        "attempt": attempt,
                    },
                )
            )
            try:
                records = _parse_json_array(completion)
            except ContextError as e:
                last_problem = str(e)
                continue
            problem = _validate_records(
                records, record_slots, {s.name for s in svc.slots}, count, names
            )
            if not problem:
                break
            last_problem = problem
        else:
            raise ContextError(
                f"{service} context failed validation after "
                f"{config.content_retries} attempts: {last_problem}"
            )
        contexts[service] = AppContext(
            service_name=service, today=today, time=clock, records=records
        )
        if service == "contacts":
            contact_names = [str(r.get("name", "")) for r in records]
    return contexts


def _parse_json_array(text: str) -> list:
    start = text.find("[")
    if start < 0:
        # fall back to a single object
        try:
            return [_parse_json_object(text)]
        except Exception:
            raise ContextError(f"no JSON array in completion: {text[:80]!r}")
    depth = 0
    in_string = False
    escape = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                try:
                    return json.loads(text[start:i + 1])
                except json.JSONDecodeError as e:
                    raise ContextError(f"invalid JSON array: {e}")
    raise ContextError("unbalanced JSON array in completion")
