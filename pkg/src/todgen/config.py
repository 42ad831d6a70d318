"""Pipeline configuration: defaults, YAML loading, and validation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .llm import BackendConfig, RetryPolicy

__all__ = ["PipelineConfig", "ConfigError", "load_config", "data_path"]


class ConfigError(ValueError):
    pass


def data_path(*parts: str) -> Path:
    """Path to a bundled data file (schemas, tables, templates)."""
    root = resources.files("todgen").joinpath("/".join(parts))
    return Path(str(root))


# Context-bearing services in generation dependency order: contacts first,
# since its names feed messages and calendar events.
CONTEXT_SERVICE_ORDER = (
    "contacts",
    "messages",
    "calendar_events",
    "reminders",
    "alarms",
)

# Which context services draw person names from the generated contacts.
CONTACT_DEPENDENT = ("messages", "calendar_events")

# Referring-expression slot preference per context service, most intuitive
# first (time-like slots beat locations).
DEFAULT_PREFERENCE_ORDERS = {
    "alarms": ("time", "name"),
    "calendar_events": ("start_time", "name", "date", "location"),
    "messages": ("sender", "time"),
    "reminders": ("time", "content", "date"),
    "contacts": ("name", "phone_number"),
}

# Intents whose confirmation concerns an irreversible operation.
DEFAULT_IRREVERSIBLE = {
    "alarms": ("delete", "modify"),
    "calendar_events": ("delete", "modify"),
    "messages": ("delete", "send_message"),
    "reminders": ("delete", "modify"),
    "contacts": ("delete",),
    "movie": ("purchase_tickets",),
    "restaurant_booking": ("reserve_table",),
    "hotel_booking": ("book_hotel",),
    "banking": ("transfer_money",),
}

# Record slots used when generating app-context instances.
CONTEXT_RECORD_SLOTS = {
    "alarms": ("time", "name", "if_repeat"),
    "calendar_events": ("name", "date", "start_time", "duration_time", "location"),
    "messages": ("sender", "time", "content"),
    "reminders": ("content", "time", "date"),
    "contacts": ("name", "phone_number", "email", "relationship"),
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    schema_manifest: str = ""
    output_dir: str = "out"
    dialog_count: int = 100
    services: tuple[str, ...] = ()  # empty = all services in the manifest

    # personas
    persona_pool_size: int = 500
    surname_table: str = ""
    industry_table: str = ""
    work_status_weights: tuple[float, float, float] = (0.6, 0.2, 0.2)

    # sampler
    kind_ratios: tuple[float, float, float] = (0.405, 0.209, 0.386)
    self_correction_rate: float = 0.19
    complex_referral_rate: float = 0.151
    alias_transitive: bool = True
    no_context_probability: float = 0.33
    optional_slot_probability: float = 0.5

    # contexts
    record_count_range: tuple[int, int] = (1, 5)
    record_count_overrides: dict = field(default_factory=lambda: {"alarms": (1, 4)})
    time_window: tuple[str, str] = ("2025-01-01", "2026-12-31")

    # backends
    user_backend: BackendConfig = BackendConfig(kind="mock")
    system_backend: BackendConfig = BackendConfig(kind="mock")
    evaluator_backend: BackendConfig = BackendConfig(kind="mock")
    max_concurrency: int = 4
    temperature: float = 0.7
    max_tokens: int = 512
    content_retries: int = 3

    # split
    test_fraction: float = 0.10
    held_out_service: str = "banking"

    preference_orders: dict = field(
        default_factory=lambda: dict(DEFAULT_PREFERENCE_ORDERS)
    )
    irreversible_intents: dict = field(
        default_factory=lambda: dict(DEFAULT_IRREVERSIBLE)
    )

    def __post_init__(self):
        if abs(sum(self.kind_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"kind_ratios must sum to 1, got {self.kind_ratios}")
        if abs(sum(self.work_status_weights) - 1.0) > 1e-9:
            raise ConfigError("work_status_weights must sum to 1")
        for name in ("self_correction_rate", "complex_referral_rate",
                     "no_context_probability", "optional_slot_probability",
                     "test_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")

    @property
    def schema_manifest_path(self) -> Path:
        if self.schema_manifest:
            return Path(self.schema_manifest)
        return data_path("data", "schemas", "manifest.txt")

    @property
    def surname_table_path(self) -> Path:
        if self.surname_table:
            return Path(self.surname_table)
        return data_path("data", "tables", "surnames.csv")

    @property
    def industry_table_path(self) -> Path:
        if self.industry_table:
            return Path(self.industry_table)
        return data_path("data", "tables", "industries.csv")

    def record_count(self, service: str) -> tuple[int, int]:
        return tuple(self.record_count_overrides.get(service, self.record_count_range))

    def is_irreversible(self, service: str, intent: str) -> bool:
        return intent in self.irreversible_intents.get(service, ())

    def preference_order(self, service: str) -> tuple[str, ...]:
        return tuple(self.preference_orders.get(service, ()))


def _backend_from_dict(obj: dict, seed: int) -> BackendConfig:
    retry = obj.get("retry", {})
    return BackendConfig(
        kind=obj.get("kind", "mock"),
        endpoint=obj.get("endpoint", ""),
        model=obj.get("model", ""),
        auth_env=obj.get("auth_env", "TODGEN_API_KEY"),
        timeout=float(obj.get("timeout", 30.0)),
        retry=RetryPolicy(
            max_attempts=int(retry.get("max_attempts", 3)),
            backoff=float(retry.get("backoff", 0.1)),
        ),
        seed=int(obj.get("seed", seed)),
    )


_TUPLE_FIELDS = {
    "work_status_weights",
    "kind_ratios",
    "record_count_range",
    "time_window",
    "services",
}


def load_config(path: Optional[str] = None, **overrides) -> PipelineConfig:
    """Load a YAML config file and apply keyword overrides."""
    values: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping: {p}")
        values.update(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    seed = int(values.get("seed", 0))
    for key in ("user_backend", "system_backend", "evaluator_backend"):
        if isinstance(values.get(key), dict):
            values[key] = _backend_from_dict(values[key], seed)
    for key in _TUPLE_FIELDS:
        if isinstance(values.get(key), list):
            values[key] = tuple(values[key])
    for key in ("preference_orders", "irreversible_intents",
                "record_count_overrides"):
        if isinstance(values.get(key), dict):
            values[key] = {k: tuple(v) for k, v in values[key].items()}
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**values)
