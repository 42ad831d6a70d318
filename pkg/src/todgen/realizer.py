"""Utterance realization: user turns via persona-conditioned prompting and
system turns via six-style single-pass generation, with dialog history built
from each system turn's default style."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional, Union

from .config import PipelineConfig, data_path
from .context import AppContext
from .llm import Backend, CompletionRequest
from .mr import Action, Arg, Call, Turn, collect_literals, print_action
from .persona import Persona, _parse_json_object
from .plot import Plot

__all__ = [
    "SIX_KEYS",
    "StyledResponse",
    "DialogRecord",
    "RealizerError",
    "TemplateError",
    "render_template",
    "build_history",
    "realize_user_turn",
    "realize_system_turn",
    "realize_dialog",
    "style_key",
]

SIX_KEYS = (
    "verbosity_low mirroring",
    "verbosity_low no_mirroring",
    "verbosity_mid mirroring",
    "verbosity_mid no_mirroring",
    "verbosity_high mirroring",
    "verbosity_high no_mirroring",
)

_SEEDED_EXCHANGE = (
    'user: {"actions": ["hello()"], "message": "Hi."}',
    'assistant: {"actions": ["offer_help()"], "message": "Hello, how can I help?"}',
)


class RealizerError(ValueError):
    pass


class TemplateError(ValueError):
    pass


def style_key(verbosity: str, mirroring: str) -> str:
    """('high', 'yes') -> 'verbosity_high mirroring'."""
    suffix = "mirroring" if mirroring in ("yes", "mirroring") else "no_mirroring"
    return f"verbosity_{verbosity} {suffix}"


@dataclass
class StyledResponse:
    variants: dict  # six-key map -> utterance
    default_key: str

    def __post_init__(self):
        missing = [k for k in SIX_KEYS if not self.variants.get(k)]
        if missing or set(self.variants) - set(SIX_KEYS):
            raise RealizerError(
                f"response must have exactly the six style keys, nonempty; "
                f"got {sorted(self.variants)}"
            )
        if self.default_key not in SIX_KEYS:
            raise RealizerError(f"bad default key {self.default_key!r}")

    @property
    def default_utterance(self) -> str:
        return self.variants[self.default_key]

    def to_dict(self) -> dict:
        return {"variants": dict(self.variants), "default_key": self.default_key}

    @classmethod
    def from_dict(cls, d: dict) -> "StyledResponse":
        return cls(variants=dict(d["variants"]), default_key=d["default_key"])


@dataclass
class DialogRecord:
    turns: list = field(default_factory=list)  # str (user) | StyledResponse

    def validate_against(self, plot: Plot) -> None:
        if len(self.turns) != len(plot.turns):
            raise RealizerError(
                f"dialog has {len(self.turns)} turns, plot has {len(plot.turns)}"
            )
        for realized, turn in zip(self.turns, plot.turns):
            if turn.speaker == "User" and not isinstance(realized, str):
                raise RealizerError("user turn must be a plain utterance")
            if turn.speaker == "System" and not isinstance(realized, StyledResponse):
                raise RealizerError("system turn must be a styled response")

    def to_dict(self) -> dict:
        return {
            "turns": [
                t if isinstance(t, str) else t.to_dict() for t in self.turns
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DialogRecord":
        return cls(
            turns=[
                t if isinstance(t, str) else StyledResponse.from_dict(t)
                for t in d["turns"]
            ]
        )


_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][\w\[\]\.]*)\s*\}\}")


def render_template(name: str, bindings: dict,
                    template_dir=None) -> str:
    """Substitute ``{{ variable }}`` placeholders; unbound variables error."""
    path = (template_dir / name) if template_dir else data_path("templates", name)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise TemplateError(f"cannot read template {name!r}: {e}")

    def sub(m: re.Match) -> str:
        var = m.group(1)
        if var not in bindings:
            raise TemplateError(f"unbound template variable {var!r} in {name!r}")
        return str(bindings[var])

    return _PLACEHOLDER.sub(sub, text)


def _strip_correction(action: Action) -> tuple[Action, Optional[object]]:
    """Split off a trailing self_correction segment, returning the bare action
    and the corrected value (if any)."""
    if action.chain and isinstance(action.chain[-1], Call) \
            and action.chain[-1].name == "self_correction":
        seg = action.chain[-1]
        new_value = seg.args[0].value if seg.args else None
        return Action(action.head, action.args, action.chain[:-1]), new_value
    return action, None


def _requested_slot(action: Action) -> str:
    for arg in action.args:
        if arg.value is None and arg.keyword:
            return arg.keyword
    return "that"


def _user_action_info(turn: Turn) -> list:
    info = []
    for action in turn.actions:
        base, correction = _strip_correction(action)
        info.append(
            {
                "head": action.head,
                "values": collect_literals(base),
                "correction_new": correction,
            }
        )
    return info


def _system_action_info(turn: Turn) -> list:
    return [
        {
            "head": a.head,
            "values": collect_literals(a),
            "requested_slot": _requested_slot(a),
        }
        for a in turn.actions
    ]


def build_history(plot: Plot, realized: list) -> str:
    """Prompt-ready conversation history: the seeded opening exchange plus
    one line per realized turn, system turns shown in their default style."""
    lines = list(_SEEDED_EXCHANGE)
    system_index = 0
    for turn, utterance in zip(plot.turns, realized):
        actions = [print_action(a) for a in turn.actions]
        if turn.speaker == "User":
            if not isinstance(utterance, str):
                raise RealizerError("history misaligned: expected user utterance")
            lines.append(
                "user: "
                + json.dumps({"actions": actions, "message": utterance},
                             ensure_ascii=False)
            )
        else:
            if not isinstance(utterance, StyledResponse):
                raise RealizerError("history misaligned: expected styled response")
            lines.append(
                "assistant: "
                + json.dumps(
                    {"actions": actions, "message": utterance.default_utterance},
                    ensure_ascii=False,
                )
            )
            system_index += 1
    return "\n".join(lines)


def _context_summary(contexts: dict[str, AppContext]) -> str:
    if not contexts:
        return "{}"
    first = next(iter(contexts.values()))
    payload = {"today": first.today, "time": first.time}
    for name, ctx in contexts.items():
        payload[name] = ctx.records
    return json.dumps(payload, ensure_ascii=False)


def realize_user_turn(
    turn: Turn,
    history: str,
    persona: Persona,
    contexts: dict[str, AppContext],
    situation: str,
    llm: Backend,
    config: PipelineConfig,
) -> str:
    if turn.speaker != "User":
        raise RealizerError("realize_user_turn needs a user turn")
    actions = [print_action(a) for a in turn.actions]
    prompt = render_template(
        "user.txt",
        {
            "user_intro": persona.introduction,
            "context": _context_summary(contexts),
            "situation": situation,
            "history": history,
            "action[cur_turn]": json.dumps(actions, ensure_ascii=False),
            "user_style_instruction": persona.speaking_habit,
        },
    )
    last_error = ""
    for attempt in range(config.content_retries):
        completion = llm.complete(
            CompletionRequest(
                messages=(("user", prompt),),
                temperature=config.temperature,
                max_tokens=config.max_tokens,
                tag="user_turn",
                metadata={
                    "actions": actions,
                    "action_info": _user_action_info(turn),
                    "attempt": attempt,
                },
            )
        )
        try:
            obj = _parse_json_object(completion)
        except Exception as e:
            last_error = str(e)
            continue
        message = obj.get("message")
        if isinstance(message, str) and message.strip():
            return message.strip()
        last_error = "completion has no 'message' key"
    raise RealizerError(
        f"user turn unrealized after {config.content_retries} attempts: "
        f"{last_error}"
    )


def realize_system_turn(
    turn: Turn,
    history: str,
    situation: str,
    default_style: tuple[str, str],
    last_user_utterance: str,
    llm: Backend,
    config: PipelineConfig,
    single_pass: bool = True,
) -> StyledResponse:
    if turn.speaker != "System":
        raise RealizerError("realize_system_turn needs a system turn")
    actions = [print_action(a) for a in turn.actions]
    actions_json = json.dumps({k: actions for k in SIX_KEYS}, ensure_ascii=False)
    prompt = render_template(
        "system.txt",
        {
            "situation": situation,
            "history": history,
            "action[cur_turn]": actions_json,
        },
    )
    metadata = {
        "actions": actions,
        "action_info": _system_action_info(turn),
        "last_user_utterance": last_user_utterance,
    }
    wanted = SIX_KEYS if not single_pass else (None,)
    variants: dict = {}
    last_error = ""
    for key in wanted:
        for attempt in range(config.content_retries):
            completion = llm.complete(
                CompletionRequest(
                    messages=(("user", prompt),),
                    temperature=config.temperature,
                    max_tokens=config.max_tokens,
                    tag="system_turn",
                    metadata={**metadata, "style_key": key, "attempt": attempt},
                )
            )
            try:
                obj = _parse_json_object(completion)
            except Exception as e:
                last_error = str(e)
                continue
            if key is None:
                if set(obj) == set(SIX_KEYS) and all(
                    isinstance(v, str) and v.strip() for v in obj.values()
                ):
                    variants = obj
                    break
                last_error = f"completion keys {sorted(obj)} != six style keys"
            else:
                v = obj.get(key)
                if isinstance(v, str) and v.strip():
                    variants[key] = v
                    break
                last_error = f"completion missing style key {key!r}"
        else:
            raise RealizerError(
                f"system turn unrealized after {config.content_retries} "
                f"attempts: {last_error}"
            )
        if key is None:
            break
    return StyledResponse(variants=variants, default_key=style_key(*default_style))


def realize_dialog(
    plot: Plot,
    persona: Persona,
    contexts: dict[str, AppContext],
    user_llm: Backend,
    system_llm: Backend,
    config: PipelineConfig,
    single_pass: bool = True,
) -> DialogRecord:
    """Realize all turns in plot order; each turn sees the history of the
    default-styled turns before it."""
    if len(plot.default_styles) != len(plot.system_turns):
        raise RealizerError("plot is missing default styles; assign them first")
    situation = ", ".join(plot.services)
    realized: list = []
    last_user = ""
    system_index = 0
    for turn in plot.turns:
        history = build_history(plot, realized)
        if turn.speaker == "User":
            utterance = realize_user_turn(
                turn, history, persona, contexts, situation, user_llm, config
            )
            last_user = utterance
            realized.append(utterance)
        else:
            response = realize_system_turn(
                turn,
                history,
                situation,
                plot.default_styles[system_index],
                last_user,
                system_llm,
                config,
                single_pass=single_pass,
            )
            realized.append(response)
            system_index += 1
    record = DialogRecord(turns=realized)
    record.validate_against(plot)
    return record
