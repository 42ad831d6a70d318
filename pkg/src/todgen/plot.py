"""Action-plot construction: slot-filling flow, multi-intent merging,
phenomena injection, referring expressions, database queries, and default
response styles."""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

from .config import PipelineConfig
from .context import AppContext
from .llm import Backend, CompletionRequest, _mock_value, _parse_today
from .mr import (
    Action,
    Arg,
    Call,
    FieldAccess,
    Turn,
    parse_action_list,
    print_action_list,
    resolve_referral,
)
from .persona import _parse_json_object
from .sampler import COMPLEX_REFERRAL, SELF_CORRECTION, DialogSpecimen
from .schema import IntentSpec, SchemaSet, ServiceSchema

__all__ = [
    "Plot",
    "QueryResult",
    "PlotError",
    "build_plot",
    "build_single_plot",
    "merge_compound",
    "merge_compositional",
    "inject_phenomena",
    "choose_referring_expression",
    "query_database",
    "assign_default_styles",
    "derive_labels",
]

VERBOSITIES = ("low", "mid", "high")


class PlotError(ValueError):
    pass


@dataclass
class Plot:
    turns: list  # list[Turn], strictly alternating, first is User
    services: tuple = ()
    intents: tuple = ()  # "service.intent" strings
    kind: str = "Single"
    phenomena: tuple = ()
    # per-system-turn (verbosity, mirroring) aligned with system turn order
    default_styles: list = field(default_factory=list)

    def validate(self) -> None:
        if not self.turns:
            raise PlotError("empty plot")
        if self.turns[0].speaker != "User":
            raise PlotError("first turn must be the user's")
        for prev, cur in zip(self.turns, self.turns[1:]):
            if prev.speaker == cur.speaker:
                raise PlotError(f"speakers do not alternate at {cur}")

    @property
    def system_turns(self) -> list:
        return [t for t in self.turns if t.speaker == "System"]

    def to_text(self) -> str:
        return "\n".join(
            f"@{t.speaker}@: {print_action_list(t.actions)}" for t in self.turns
        )

    def to_dict(self) -> dict:
        return {
            "turns": self.to_text(),
            "default_styles": [list(s) for s in self.default_styles],
            "labels": {
                "services": list(self.services),
                "intents": list(self.intents),
                "kind": self.kind,
                "phenomena": list(self.phenomena),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Plot":
        turns = []
        for line in d["turns"].splitlines():
            speaker, _, rest = line.partition("@: ")
            turns.append(Turn(speaker.lstrip("@"), parse_action_list(rest)))
        labels = d.get("labels", {})
        plot = cls(
            turns=turns,
            services=tuple(labels.get("services", ())),
            intents=tuple(labels.get("intents", ())),
            kind=labels.get("kind", "Single"),
            phenomena=tuple(labels.get("phenomena", ())),
            default_styles=[tuple(s) for s in d.get("default_styles", [])],
        )
        plot.validate()
        return plot


@dataclass
class QueryResult:
    service: str
    intent: str
    records: list

    def __post_init__(self):
        if len(self.records) != 5:
            raise PlotError(f"query must return 5 records, got {len(self.records)}")


def choose_referring_expression(
    target: dict, records: list, preference: tuple[str, ...]
) -> tuple[str, ...]:
    """Smallest slot set that uniquely identifies the target record; ties on
    size resolve to the most preferred combination in preference order."""
    if not any(r is target or r == target for r in records):
        raise PlotError("target record is not in the context")
    usable = [s for s in preference if s in target]
    for size in range(1, len(usable) + 1):
        for combo in combinations(usable, size):
            matches = [
                r for r in records
                if all(str(r.get(s)) == str(target[s]) for s in combo)
            ]
            if len(matches) == 1:
                return combo
    raise PlotError("no referring expression disambiguates the target record")


def query_database(
    service: str,
    intent: IntentSpec,
    input_values: dict,
    llm: Backend,
    config: PipelineConfig,
    today: str = "",
) -> QueryResult:
    """One backend completion producing 5 result records consistent with
    every input value."""
    if not (intent.report_result or intent.return_list):
        raise PlotError(f"intent {intent.name!r} does not query a database")
    prompt = (
        f"Simulate a database search for {service}.{intent.name}. Given the "
        f"conditions {json.dumps(input_values)}, return a JSON array of 5 "
        f"different records, each echoing the conditions and filling "
        f"{list(intent.result_slots)}."
    )
    last_problem = ""
    for attempt in range(config.content_retries):
        completion = llm.complete(
            CompletionRequest(
                messages=(("user", prompt),),
                tag="db_query",
                metadata={
                    "input_values": input_values,
                    "result_slots": list(intent.result_slots),
                    "today": today,
                    "service": service,
                    "intent": intent.name,
                    "attempt": attempt,
                },
            )
        )
        try:
            records = json.loads(completion)
        except json.JSONDecodeError as e:
            last_problem = f"invalid JSON: {e}"
            continue
        problem = ""
        if not isinstance(records, list) or len(records) != 5:
            problem = "expected exactly 5 records"
        else:
            for r in records:
                for k, v in input_values.items():
                    if str(r.get(k)) != str(v):
                        problem = f"record field {k!r} inconsistent with input"
                        break
                for slot in intent.result_slots:
                    if slot not in r:
                        problem = f"record missing result slot {slot!r}"
                        break
                if problem:
                    break
        if not problem:
            return QueryResult(service=service, intent=intent.name, records=records)
        last_problem = problem
    raise PlotError(
        f"database query failed validation after {config.content_retries} "
        f"attempts: {last_problem}"
    )


def _value_args(values: dict, slots) -> tuple[Arg, ...]:
    return tuple(Arg(s, values[s]) for s in slots if s in values)


def _build_context_initial(
    service: str,
    intent: IntentSpec,
    spec: DialogSpecimen,
    ctx: AppContext,
    config: PipelineConfig,
    prefix: str,
) -> tuple[Action, Action, dict]:
    """User initial action and the system-side target reference for a
    context-interaction intent."""
    idx = spec.target_index(service, intent.name)
    if idx is None or idx >= len(ctx.records):
        raise PlotError(f"no context target for {service}.{intent.name}")
    target = ctx.records[idx]
    preference = config.preference_order(service) or tuple(target)
    try:
        ref_slots = choose_referring_expression(target, ctx.records, preference)
    except PlotError:
        ref_slots = ()  # duplicate records; fall back to an index referral
    if ref_slots:
        getter_args = tuple(Arg(s, target[s]) for s in ref_slots)
    else:
        order_slot = preference[0]
        ordered = sorted(ctx.records, key=lambda r: str(r.get(order_slot)))
        getter_args = (
            Arg("ordered_by", order_slot),
            Arg("index", ordered.index(target)),
        )
    # what the operation acts on / reports: keyword new values for state
    # changes, bare emphasis slots otherwise
    new_values = {
        slot: spec.slot_values[f"{service}.{intent.name}.new.{slot}"]
        for slot in intent.optional_slots
        if f"{service}.{intent.name}.new.{slot}" in spec.slot_values
    }
    if new_values:
        op_args = tuple(Arg(k, v) for k, v in new_values.items())
    else:
        emphasis = intent.summary_emphasis_slots or intent.result_slots[:1]
        op_args = tuple(Arg(s, None) for s in emphasis)
    getter = f"get_{service}"
    user_action = Action(
        getter, getter_args, (Call(f"{prefix}{intent.name}", op_args),)
    )
    target_action = Action(getter, getter_args, (Call(intent.name, op_args),))
    return user_action, target_action, target


def build_single_plot(
    spec: DialogSpecimen,
    service_intent: tuple[str, str],
    schemas: SchemaSet,
    contexts: dict[str, AppContext],
    rng: random.Random,
    llm: Backend,
    config: PipelineConfig,
    prefix: str = "",
    initial_slots: Optional[tuple[str, ...]] = None,
) -> Plot:
    """Slot-filling plot for one intent: initial query, one information
    request per missing required slot, optional confirmation, result
    reporting, and a terminal completion notice."""
    service, intent_name = service_intent
    svc = schemas.service(service)
    intent = svc.intent(intent_name)
    ctx = contexts.get(service)
    today = next((c.today for c in contexts.values()), "")
    turns: list[Turn] = []

    if intent.require_context:
        if ctx is None:
            raise PlotError(f"{service}.{intent_name} requires an app context")
        user_action, target_action, target = _build_context_initial(
            service, intent, spec, ctx, config, prefix
        )
        turns.append(Turn("User", (user_action,)))
        final_actions: list[Action] = []
        if intent.require_confirmation:
            turns.append(
                Turn(
                    "System",
                    (Action(f"{prefix}ask_confirm", (Arg(None, target_action),)),),
                )
            )
            turns.append(Turn("User", (Action(f"{prefix}confirm"),)))
        if intent.report_result:
            emphasis = intent.summary_emphasis_slots or intent.result_slots
            final_actions.append(
                Action(
                    f"{prefix}inform_result",
                    tuple(Arg(s, target[s]) for s in emphasis if s in target),
                )
            )
        if intent.performs_operation:
            final_actions.append(
                Action(f"{prefix}notify_done", (Arg(None, target_action),))
            )
        if final_actions:
            turns.append(Turn("System", tuple(final_actions)))
        return Plot(
            turns=turns,
            services=(service,),
            intents=(f"{service}.{intent_name}",),
        )

    # plain slot-filling intent
    values = {
        slot: spec.value(service, intent_name, slot)
        for slot in intent.input_slots
        if spec.value(service, intent_name, slot) is not None
    }
    missing_values = [s for s in intent.required_slots if s not in values]
    if missing_values:
        raise PlotError(
            f"specimen lacks a value for required slot {missing_values[0]!r}"
        )
    if initial_slots is None:
        chosen: list[str] = list(intent.minimum_initial_slots)
        for slot in intent.required_slots:
            if slot not in chosen and rng.random() < 0.5:
                chosen.append(slot)
        for slot in intent.optional_slots:
            if slot in values and rng.random() < config.optional_slot_probability:
                chosen.append(slot)
        pending = [s for s in intent.input_slots
                   if s not in chosen and s in values]
        while len(chosen) < intent.minimum_input_slot_number and pending:
            chosen.append(pending.pop(0))
        initial_slots = tuple(s for s in intent.input_slots if s in chosen)
    used_slots = tuple(
        s for s in intent.input_slots
        if s in values and (s in initial_slots or s in intent.required_slots)
    )
    head = f"{prefix}{intent_name}"
    turns.append(
        Turn("User", (Action(head, _value_args(values, initial_slots)),))
    )
    for slot in intent.required_slots:
        if slot in initial_slots:
            continue
        turns.append(
            Turn(
                "System",
                (Action(f"{prefix}request_information", (Arg(slot, None),)),),
            )
        )
        turns.append(
            Turn(
                "User",
                (Action(f"{prefix}inform_information", (Arg(slot, values[slot]),)),),
            )
        )
    full_action = Action(intent_name, _value_args(values, used_slots))
    if intent.require_confirmation:
        turns.append(
            Turn("System", (Action(f"{prefix}ask_confirm", (Arg(None, full_action),)),))
        )
        turns.append(Turn("User", (Action(f"{prefix}confirm"),)))
    final_actions = []
    if intent.report_result or intent.return_list:
        inputs = {s: values[s] for s in used_slots}
        # a pre-generated result value (compositional inner) constrains the query
        for slot in intent.result_slots:
            fixed = spec.value(service, intent_name, slot)
            if fixed is not None:
                inputs[slot] = fixed
        result = query_database(service, intent, inputs, llm, config, today)
        emphasis = intent.summary_emphasis_slots or intent.result_slots
        if intent.return_list:
            listed = {
                s: "; ".join(str(r[s]) for r in result.records)
                for s in emphasis
            }
            final_actions.append(
                Action(f"{prefix}summary", tuple(Arg(k, v) for k, v in listed.items()))
            )
        else:
            first = result.records[0]
            final_actions.append(
                Action(
                    f"{prefix}inform_result",
                    tuple(Arg(s, first[s]) for s in emphasis if s in first),
                )
            )
    if intent.performs_operation:
        final_actions.append(
            Action(f"{prefix}notify_done", (Arg(None, full_action),))
        )
    if final_actions:
        turns.append(Turn("System", tuple(final_actions)))
    plot = Plot(
        turns=turns, services=(service,), intents=(f"{service}.{intent_name}",)
    )
    plot.validate()
    return plot


# ---------------------------------------------------------------------------
# merging
# ---------------------------------------------------------------------------


def _requests_info(turn: Turn) -> bool:
    return any(a.head.endswith("request_information") for a in turn.actions)


def _is_confirm_turn(turn: Turn) -> bool:
    return any(a.head.endswith("ask_confirm") for a in turn.actions)


def _is_notify_only(turn: Turn) -> bool:
    return all(a.head.endswith("notify_done") for a in turn.actions)


def _confirm_first(actions) -> tuple[Action, ...]:
    ranked = sorted(
        actions, key=lambda a: 0 if a.head.endswith("ask_confirm") else 1
    )
    return tuple(ranked)


def _normalize_alternation(turns: list) -> list:
    merged: list[Turn] = []
    for turn in turns:
        if merged and merged[-1].speaker == turn.speaker:
            actions = merged[-1].actions + turn.actions
            if turn.speaker == "System":
                actions = _confirm_first(actions)
            merged[-1] = Turn(turn.speaker, actions)
        else:
            merged.append(turn)
    return merged


def merge_compound(a: Plot, b: Plot) -> Plot:
    """Merge two single-intent plots: concatenated initial queries; paired
    information requests stay sequential; other system responses combine with
    confirmations first; a finished plot's completion notice waits until after
    the other plot's confirmation."""
    if len(a.intents) != 1 or len(b.intents) != 1:
        raise PlotError("merge_compound expects single-intent plots")
    turns: list[Turn] = [
        Turn("User", a.turns[0].actions + b.turns[0].actions)
    ]
    qa, qb = deque(a.turns[1:]), deque(b.turns[1:])

    def emit_pair(q):
        turns.append(q.popleft())
        if q and q[0].speaker == "User":
            turns.append(q.popleft())

    while qa and qb:
        asys, bsys = qa[0], qb[0]
        if _requests_info(asys) and _requests_info(bsys):
            emit_pair(qa)
            emit_pair(qb)
            continue
        if _is_confirm_turn(asys) and _is_notify_only(bsys) and len(qb) == 1:
            notify = qb.popleft()
            emit_pair(qa)  # ask_confirm + user confirm
            if qa:
                nxt = qa.popleft()
                turns.append(Turn("System", nxt.actions + notify.actions))
            else:
                turns.append(notify)
            continue
        if _is_confirm_turn(bsys) and _is_notify_only(asys) and len(qa) == 1:
            notify = qa.popleft()
            emit_pair(qb)
            if qb:
                nxt = qb.popleft()
                turns.append(Turn("System", nxt.actions + notify.actions))
            else:
                turns.append(notify)
            continue
        sys_a, sys_b = qa.popleft(), qb.popleft()
        turns.append(Turn("System", _confirm_first(sys_a.actions + sys_b.actions)))
        answers: tuple = ()
        if qa and qa[0].speaker == "User":
            answers += qa.popleft().actions
        if qb and qb[0].speaker == "User":
            answers += qb.popleft().actions
        if answers:
            turns.append(Turn("User", answers))
    turns.extend(qa)
    turns.extend(qb)
    plot = Plot(
        turns=_normalize_alternation(turns),
        services=a.services + tuple(s for s in b.services if s not in a.services),
        intents=a.intents + b.intents,
        kind="Compound",
    )
    plot.validate()
    return plot


def merge_compositional(
    outer: Plot,
    inner_action: Action,
    matched_slot: tuple[str, str],
    inner_lead_actions: tuple[Action, ...] = (),
) -> Plot:
    """Substitute the inner intent action for the outer intent's matched input
    slot; any inner resolution actions lead the first system response."""
    inner_result_slot, outer_input_slot = matched_slot
    initial = outer.turns[0]
    replaced = []
    hit = False
    for action in initial.actions:
        if action.has_arg(outer_input_slot) and not hit:
            replaced.append(action.replace_arg(outer_input_slot, inner_action))
            hit = True
        else:
            replaced.append(action)
    if not hit:
        raise PlotError(
            f"outer initial action has no arg {outer_input_slot!r} to substitute"
        )
    turns = [Turn("User", tuple(replaced))] + list(outer.turns[1:])
    if inner_lead_actions:
        for i, turn in enumerate(turns):
            if turn.speaker == "System":
                turns[i] = Turn("System", inner_lead_actions + turn.actions)
                break
        else:
            turns.append(Turn("System", inner_lead_actions))
    plot = Plot(
        turns=_normalize_alternation(turns),
        services=outer.services,
        intents=outer.intents,
        kind="Compositional",
    )
    plot.validate()
    return plot


# ---------------------------------------------------------------------------
# phenomena
# ---------------------------------------------------------------------------


def _is_context_getter(action: Action, contexts: dict) -> bool:
    return action.head.startswith("get_") and action.head[len("get_"):] in contexts


def _literal_keyword_args(action: Action, contexts: dict):
    """Args a user could plausibly correct: informed values, not the
    referring-expression filters that pick out a context record."""
    def eligible(arg: Arg) -> bool:
        return (
            arg.keyword is not None
            and arg.keyword not in ("ordered_by", "index")
            and isinstance(arg.value, (str, int))
            and not isinstance(arg.value, bool)
        )

    if not _is_context_getter(action, contexts):
        for arg in action.args:
            if eligible(arg):
                yield arg
    for seg in action.chain:
        if isinstance(seg, Call) and seg.name != "self_correction":
            for arg in seg.args:
                if eligible(arg):
                    yield arg


def _replace_value_deep(action: Action, keyword: str, old, new) -> Action:
    def fix_args(args):
        out = []
        for arg in args:
            value = arg.value
            if isinstance(value, Action):
                value = _replace_value_deep(value, keyword, old, new)
            elif arg.keyword == keyword and value == old:
                value = new
            out.append(Arg(arg.keyword, value))
        return tuple(out)

    chain = []
    for seg in action.chain:
        if isinstance(seg, Call):
            chain.append(Call(seg.name, fix_args(seg.args)))
        else:
            chain.append(seg)
    return Action(action.head, fix_args(action.args), tuple(chain))


def _slot_potential_values(schemas: SchemaSet, services, slot: str):
    for name in services:
        svc = schemas.service(name)
        if svc.has_slot(slot):
            return svc.slot(slot).potential_values
    return ()


def _resample_value(rng: random.Random, slot: str, old, potential_values,
                    today: str):
    for _ in range(8):
        candidate = _mock_value(
            rng, slot, potential_values, _parse_today({"today": today})
        )
        if str(candidate) != str(old):
            return candidate
    return f"new {old}" if isinstance(old, str) else old + 1


def inject_phenomena(
    plot: Plot,
    phenomena: frozenset,
    rng: random.Random,
    contexts: dict[str, AppContext],
    schemas: SchemaSet,
    spec: DialogSpecimen,
) -> Plot:
    """Add self-correction and complex-referral surface forms to user turns."""
    turns = list(plot.turns)
    applied = []

    if COMPLEX_REFERRAL in phenomena:
        done = False
        for i, turn in enumerate(turns):
            if turn.speaker != "User" or done:
                continue
            new_actions = []
            for action in turn.actions:
                rewritten = _rewrite_as_referral(action, contexts)
                if rewritten is not None and not done:
                    new_actions.append(rewritten)
                    done = True
                else:
                    new_actions.append(action)
            turns[i] = Turn("User", tuple(new_actions))
        if done:
            applied.append(COMPLEX_REFERRAL)
        elif not contexts:
            raise PlotError("complex referral requires an app context")

    if SELF_CORRECTION in phenomena:
        candidates = []
        for i, turn in enumerate(turns):
            if turn.speaker != "User":
                continue
            for j, action in enumerate(turn.actions):
                for arg in _literal_keyword_args(action, contexts):
                    candidates.append((i, j, arg))
        if not candidates:
            # fall back to a misspoken referring expression: the user first
            # gives a wrong filter value, then corrects to the record's real
            # one, so later references still resolve
            for i, turn in enumerate(turns):
                if turn.speaker != "User" or SELF_CORRECTION in applied:
                    continue
                for j, action in enumerate(turn.actions):
                    if not _is_context_getter(action, contexts):
                        continue
                    filters = [
                        a for a in action.args
                        if a.keyword not in (None, "ordered_by", "index")
                        and isinstance(a.value, (str, int))
                        and not isinstance(a.value, bool)
                    ]
                    if not filters:
                        continue
                    arg = filters[rng.randrange(len(filters))]
                    today = next((c.today for c in contexts.values()), "")
                    wrong = _resample_value(
                        rng, arg.keyword, arg.value,
                        _slot_potential_values(schemas, plot.services, arg.keyword),
                        today,
                    )
                    corrected = Action(
                        action.head,
                        tuple(
                            Arg(a.keyword, wrong) if a is arg else a
                            for a in action.args
                        ),
                        action.chain
                        + (Call("self_correction", (Arg(arg.keyword, arg.value),)),),
                    )
                    actions = list(turn.actions)
                    actions[j] = corrected
                    turns[i] = Turn("User", tuple(actions))
                    applied.append(SELF_CORRECTION)
                    break
        if candidates:
            i, j, arg = candidates[rng.randrange(len(candidates))]
            today = next((c.today for c in contexts.values()), "")
            new_value = _resample_value(
                rng,
                arg.keyword,
                arg.value,
                _slot_potential_values(schemas, plot.services, arg.keyword),
                today,
            )
            action = turns[i].actions[j]
            corrected = Action(
                action.head,
                action.args,
                action.chain + (Call("self_correction", (Arg(arg.keyword, new_value),)),),
            )
            actions = list(turns[i].actions)
            actions[j] = corrected
            turns[i] = Turn("User", tuple(actions))
            for k in range(i + 1, len(turns)):
                turns[k] = Turn(
                    turns[k].speaker,
                    tuple(
                        _replace_value_deep(a, arg.keyword, arg.value, new_value)
                        for a in turns[k].actions
                    ),
                )
            applied.append(SELF_CORRECTION)
    out = Plot(
        turns=turns,
        services=plot.services,
        intents=plot.intents,
        kind=plot.kind,
        phenomena=tuple(sorted(set(plot.phenomena) | set(applied))),
        default_styles=list(plot.default_styles),
    )
    out.validate()
    return out


def _rewrite_as_referral(action: Action, contexts: dict[str, AppContext]):
    """Rewrite a slot-filter context getter into an ordered_by/index referral
    that resolves to the same record."""
    def rewrite_getter(a: Action):
        if not a.head.startswith("get_"):
            return None
        service = a.head[len("get_"):]
        ctx = contexts.get(service)
        if ctx is None or not ctx.records:
            return None
        if a.has_arg("ordered_by") or a.has_arg("index"):
            return None
        filters = [x for x in a.args if x.keyword and x.value is not None]
        if not filters:
            return None
        try:
            target = resolve_referral(Action(a.head, tuple(filters)), ctx)
        except Exception:
            return None
        if not isinstance(target, dict):
            return None
        order_slot = filters[0].keyword
        if order_slot not in target:
            return None
        ordered = sorted(ctx.records, key=lambda r: str(r.get(order_slot)))
        idx = next(
            i for i, r in enumerate(ordered) if r is target or r == target
        )
        return Action(
            a.head,
            (Arg("ordered_by", order_slot), Arg("index", idx)),
            a.chain,
        )

    direct = rewrite_getter(action)
    if direct is not None:
        return direct
    # nested referral (e.g. a compositional inner getter)
    for arg in action.args:
        if isinstance(arg.value, Action):
            nested = rewrite_getter(arg.value)
            if nested is not None:
                return Action(
                    action.head,
                    tuple(
                        Arg(x.keyword, nested) if x is arg else x
                        for x in action.args
                    ),
                    action.chain,
                )
    return None


# ---------------------------------------------------------------------------
# default styles
# ---------------------------------------------------------------------------

_MIRROR_UNSAFE_TERMS = (
    "damn", "hell", "stupid", "idiot", "hate", "kill", "sucks", "crap",
    "terrible people", "race", "gender", "politics", "immigrants",
)


def _turn_has_phenomenon(turn: Turn) -> bool:
    for action in turn.actions:
        for seg in action.chain:
            if isinstance(seg, Call) and seg.name == "self_correction":
                return True
        if action.head.startswith("get_") and action.has_arg("ordered_by"):
            return True
        for arg in action.args:
            if isinstance(arg.value, Action):
                if _turn_has_phenomenon(Turn(turn.speaker, (arg.value,))):
                    return True
    return False


def _confirmed_intent(action: Action):
    """The (op name, nested action) a confirmation refers to."""
    for arg in action.args:
        if isinstance(arg.value, Action):
            nested = arg.value
            for seg in nested.chain:
                if isinstance(seg, Call) and seg.name != "self_correction":
                    return seg.name, nested
            return nested.head, nested
    return None, None


def _is_irreversible_confirm(
    action: Action, services, config: PipelineConfig
) -> bool:
    op, _ = _confirmed_intent(action)
    if op is None:
        return False
    for service in services:
        candidate = op
        if candidate.startswith(f"{service}_"):
            candidate = candidate[len(service) + 1:]
        if config.is_irreversible(service, candidate):
            return True
    return False


def _mirroring_unsafe(
    user_turn: Turn, contexts: dict[str, AppContext]
) -> bool:
    """Safety screen: emotionally/bias-loaded literals, or an ambiguous
    referring expression matching more than one context record."""
    def scan(action: Action) -> bool:
        for arg in action.args:
            if isinstance(arg.value, str):
                lowered = arg.value.lower()
                if any(term in lowered for term in _MIRROR_UNSAFE_TERMS):
                    return True
            if isinstance(arg.value, Action) and scan(arg.value):
                return True
        if action.head.startswith("get_") and not action.has_arg("index"):
            service = action.head[len("get_"):]
            ctx = contexts.get(service)
            filters = [a for a in action.args if a.keyword and a.value is not None]
            if ctx is not None and filters:
                matches = [
                    r for r in ctx.records
                    if all(str(r.get(f.keyword)) == str(f.value) for f in filters)
                ]
                if len(matches) > 1:
                    return True
        return False

    return any(scan(a) for a in user_turn.actions)


def assign_default_styles(
    plot: Plot,
    config: PipelineConfig,
    contexts: Optional[dict[str, AppContext]] = None,
) -> Plot:
    """Default (verbosity, mirroring) per system turn.

    Priority: phenomenon in the previous user turn -> high; confirmation of an
    irreversible operation -> high; new information -> mid for a single-record
    inform, high for a multi-record summary; otherwise low. Mirroring defaults
    to yes unless the previous user turn fails the safety screen.
    """
    contexts = contexts or {}
    styles = []
    for i, turn in enumerate(plot.turns):
        if turn.speaker != "System":
            continue
        prev_user = plot.turns[i - 1] if i > 0 else None
        if prev_user is not None and _turn_has_phenomenon(prev_user):
            verbosity = "high"
        elif any(
            a.head.endswith("ask_confirm")
            and _is_irreversible_confirm(a, plot.services, config)
            for a in turn.actions
        ):
            verbosity = "high"
        elif any(a.head.endswith("summary") for a in turn.actions):
            verbosity = "high"
        elif any(a.head.endswith("inform_result") for a in turn.actions):
            verbosity = "mid"
        else:
            verbosity = "low"
        mirroring = "yes"
        if prev_user is not None and _mirroring_unsafe(prev_user, contexts):
            mirroring = "no"
        styles.append((verbosity, mirroring))
    return Plot(
        turns=list(plot.turns),
        services=plot.services,
        intents=plot.intents,
        kind=plot.kind,
        phenomena=plot.phenomena,
        default_styles=styles,
    )


# ---------------------------------------------------------------------------
# top level + labels
# ---------------------------------------------------------------------------


def _intent_prefix(schemas: SchemaSet, service: str, intent: str,
                   multi: bool) -> str:
    if multi:
        return f"{service}_"
    # single-intent plots stay unprefixed unless the intent name is ambiguous
    owners = [
        svc.service_name
        for svc in schemas.services
        if any(i.name == intent for i in svc.intent_operations)
    ]
    return f"{service}_" if len(owners) > 1 else ""


def _build_inner_action(
    spec: DialogSpecimen,
    schemas: SchemaSet,
    contexts: dict[str, AppContext],
    config: PipelineConfig,
) -> tuple[Action, tuple[Action, ...]]:
    """Inner intent as a nested value action, plus any system actions that
    resolve it (a database-backed inner leads the first system response)."""
    inner_service, inner_intent_name = spec.intents[1]
    inner_slot, _ = spec.matched_slot
    svc = schemas.service(inner_service)
    intent = svc.intent(inner_intent_name)
    prefix = f"{inner_service}_"
    if intent.require_context:
        ctx = contexts.get(inner_service)
        if ctx is None:
            raise PlotError(f"{inner_service} context missing for inner intent")
        _, target_action, _ = _build_context_initial(
            inner_service, intent, spec, ctx, config, prefix
        )
        # reference form: getter + service-prefixed check + field access
        inner = Action(
            target_action.head,
            target_action.args,
            (Call(f"{prefix}check", (Arg(inner_slot, None),)),
             FieldAccess(inner_slot)),
        )
        return inner, ()
    values = {
        s: spec.value(inner_service, inner_intent_name, s)
        for s in intent.input_slots
        if spec.value(inner_service, inner_intent_name, s) is not None
    }
    inner = Action(
        f"{prefix}{inner_intent_name}",
        _value_args(values, intent.input_slots),
        (FieldAccess(inner_slot),),
    )
    result_value = spec.value(inner_service, inner_intent_name, inner_slot)
    lead = (
        Action(f"{prefix}inform_result", (Arg(inner_slot, result_value),)),
    )
    return inner, lead


def build_plot(
    spec: DialogSpecimen,
    schemas: SchemaSet,
    contexts: dict[str, AppContext],
    rng: random.Random,
    llm: Backend,
    config: PipelineConfig,
) -> Plot:
    """Full plot for a specimen: construct, merge, inject phenomena, style."""
    multi = spec.kind != "Single"
    if spec.kind == "Single":
        service, intent = spec.intents[0]
        prefix = _intent_prefix(schemas, service, intent, multi=False)
        plot = build_single_plot(
            spec, (service, intent), schemas, contexts, rng, llm, config,
            prefix=prefix,
        )
    elif spec.kind == "Compound":
        parts = [
            build_single_plot(
                spec, pair, schemas, contexts, rng, llm, config,
                prefix=f"{pair[0]}_",
            )
            for pair in spec.intents
        ]
        plot = merge_compound(parts[0], parts[1])
    else:  # Compositional
        outer_pair = spec.intents[0]
        outer = build_single_plot(
            spec, outer_pair, schemas, contexts, rng, llm, config,
            prefix=f"{outer_pair[0]}_",
            initial_slots=_compositional_initial_slots(spec, schemas, rng, config),
        )
        inner_action, lead = _build_inner_action(spec, schemas, contexts, config)
        plot = merge_compositional(outer, inner_action, spec.matched_slot, lead)
        plot = Plot(
            turns=plot.turns,
            services=tuple(dict.fromkeys(
                [outer_pair[0], spec.intents[1][0]]
            )),
            intents=(f"{outer_pair[0]}.{outer_pair[1]}",
                     f"{spec.intents[1][0]}.{spec.intents[1][1]}"),
            kind="Compositional",
        )
    plot = Plot(
        turns=plot.turns,
        services=plot.services,
        intents=plot.intents,
        kind=spec.kind,
        phenomena=plot.phenomena,
    )
    plot = inject_phenomena(plot, spec.phenomena, rng, contexts, schemas, spec)
    # labels always reflect what the turns actually contain (an ambiguous
    # context can force an index referral even when none was sampled)
    plot = Plot(
        turns=plot.turns,
        services=plot.services,
        intents=plot.intents,
        kind=plot.kind,
        phenomena=derive_phenomena(plot.turns),
    )
    plot = assign_default_styles(plot, config, contexts)
    plot.validate()
    return plot


def _compositional_initial_slots(
    spec: DialogSpecimen, schemas: SchemaSet, rng: random.Random,
    config: PipelineConfig,
) -> tuple[str, ...]:
    """The matched outer slot must appear in the initial query so the inner
    action can be substituted for it."""
    service, intent_name = spec.intents[0]
    intent = schemas.service(service).intent(intent_name)
    if intent.require_context:
        return ()
    _, outer_slot = spec.matched_slot
    chosen = list(intent.minimum_initial_slots)
    if outer_slot not in chosen:
        chosen.append(outer_slot)
    for slot in intent.required_slots:
        if slot not in chosen and rng.random() < 0.5:
            chosen.append(slot)
    for slot in intent.optional_slots:
        if (
            spec.value(service, intent_name, slot) is not None
            and slot not in chosen
            and rng.random() < config.optional_slot_probability
        ):
            chosen.append(slot)
    return tuple(s for s in intent.input_slots if s in chosen)


def derive_phenomena(turns) -> tuple:
    """Phenomenon labels recomputed from user-turn surface forms."""
    phenomena = set()
    for turn in turns:
        if turn.speaker != "User":
            continue
        for action in turn.actions:
            if any(
                isinstance(s, Call) and s.name == "self_correction"
                for s in action.chain
            ):
                phenomena.add(SELF_CORRECTION)
            if action.head.startswith("get_") and action.has_arg("ordered_by"):
                phenomena.add(COMPLEX_REFERRAL)
            for arg in action.args:
                if (
                    isinstance(arg.value, Action)
                    and arg.value.head.startswith("get_")
                    and arg.value.has_arg("ordered_by")
                ):
                    phenomena.add(COMPLEX_REFERRAL)
    return tuple(sorted(phenomena))


def derive_labels(plot: Plot, schemas: SchemaSet) -> dict:
    """Recompute labels from the plot text (consistency oracle)."""
    initial = plot.turns[0]
    if len(initial.actions) > 1:
        kind = "Compound"
    elif any(isinstance(a.value, Action) for a in initial.actions[0].args):
        kind = "Compositional"
    else:
        kind = "Single"
    phenomena = set(derive_phenomena(plot.turns))

    def action_service_intent(action: Action):
        if action.head.startswith("get_") and schemas.has_service(
            action.head[len("get_"):]
        ):
            service = action.head[len("get_"):]
            op = action.chain[0].name if action.chain else "check"
            if op.startswith(f"{service}_"):
                op = op[len(service) + 1:]
            return service, op
        for svc in schemas.services:
            for intent in svc.intent_operations:
                if action.head == f"{svc.service_name}_{intent.name}":
                    return svc.service_name, intent.name
        owners = [
            svc.service_name
            for svc in schemas.services
            if any(i.name == action.head for i in svc.intent_operations)
        ]
        if len(owners) == 1:
            return owners[0], action.head
        raise PlotError(f"cannot attribute action {action.head!r} to a service")

    pairs = []
    for action in initial.actions:
        pairs.append(action_service_intent(action))
        for arg in action.args:
            if isinstance(arg.value, Action):
                inner = arg.value
                base = Action(
                    inner.head,
                    tuple(a for a in inner.args if not isinstance(a.value, Action)),
                    inner.chain,
                )
                try:
                    pairs.append(action_service_intent(base))
                except PlotError:
                    pass
    services = tuple(dict.fromkeys(s for s, _ in pairs))
    intents = tuple(f"{s}.{i}" for s, i in pairs)
    return {
        "kind": kind,
        "phenomena": tuple(sorted(phenomena)),
        "services": services,
        "intents": intents,
    }
