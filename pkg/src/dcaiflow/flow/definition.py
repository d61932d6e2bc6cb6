"""Flow-definition documents.

A flow is JSON::

    {
      "flow_id": "dnn-train",
      "start": "transfer_in",
      "states": {
        "transfer_in": {"kind": "transfer", "provider": "globus",
                        "params": {"src": "$input.src_path"}, "next": "train"},
        "train":       {"kind": "compute", "provider": "dcai",
                        "params": {"function": "$input.train_fn"},
                        "max_retries": 3, "retry_backoff": 1.0,
                        "next": "model_out", "on_failure": "failed"},
        "model_out":   {"kind": "transfer", "provider": "globus", "params": {}},
        "failed":      {"kind": "fail"}
      }
    }

``next`` omitted or null ends the run Succeeded; ``on_failure`` omitted or
null ends it Failed. ``choice`` states carry
``{"variable": "<state>.<output key>", "op": "<=", "value": 20,
"then": "a", "else": "b"}``. Parameters may reference the run's input
document with ``$input.<key>``; ``$$`` is a literal dollar sign.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping


class FlowParseError(ValueError):
    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


class ActionKind(enum.Enum):
    TRANSFER = "transfer"
    COMPUTE = "compute"
    CHOICE = "choice"
    SUCCEED = "succeed"
    FAIL = "fail"

    @property
    def terminal(self) -> bool:
        return self in (ActionKind.SUCCEED, ActionKind.FAIL)


COMPARATORS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "=": lambda a, b: a == b,
    "==": lambda a, b: a == b,
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
}

DEFAULT_MAX_RETRIES = 3
DEFAULT_RETRY_BACKOFF_S = 1.0


@dataclass(frozen=True)
class ChoiceSpec:
    variable: str
    op: str
    value: float
    then: str
    otherwise: str

    def source_state(self) -> str:
        return self.variable.split(".", 1)[0]

    def evaluate(self, outputs: Mapping[str, Any]) -> str:
        state, _, path = self.variable.partition(".")
        node: Any = outputs.get(state)
        for part in path.split("."):
            if not isinstance(node, Mapping) or part not in node:
                raise LookupError(f"choice variable {self.variable!r} not found in prior outputs")
            node = node[part]
        if isinstance(node, bool) or not isinstance(node, (int, float)):
            raise TypeError(f"choice variable {self.variable!r} is not numeric: {node!r}")
        return self.then if COMPARATORS[self.op](node, self.value) else self.otherwise


@dataclass(frozen=True)
class ActionSpec:
    name: str
    kind: ActionKind
    provider: str | None = None
    params: Mapping[str, Any] = field(default_factory=dict)
    next: str | None = None
    on_failure: str | None = None
    max_retries: int = DEFAULT_MAX_RETRIES
    retry_backoff: float = DEFAULT_RETRY_BACKOFF_S
    role: str | None = None
    choice: ChoiceSpec | None = None

    def targets(self) -> Iterator[tuple[str, str]]:
        if self.next is not None:
            yield "next", self.next
        if self.on_failure is not None:
            yield "on_failure", self.on_failure
        if self.choice is not None:
            yield "choice.then", self.choice.then
            yield "choice.else", self.choice.otherwise


@dataclass(frozen=True)
class FlowDefinition:
    flow_id: str
    start: str
    states: Mapping[str, ActionSpec]
    document: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def reachable(self) -> list[str]:
        """States reachable from start, in first-visit order."""
        seen: list[str] = []
        stack = [self.start]
        while stack:
            name = stack.pop()
            if name in seen:
                continue
            seen.append(name)
            spec = self.states[name]
            stack.extend(t for _, t in reversed(list(spec.targets())))
        return seen

    def input_keys(self) -> set[str]:
        keys: set[str] = set()
        for name in self.reachable():
            keys |= template_refs(self.states[name].params)
        return keys


# --- templates -------------------------------------------------------------

_REF = re.compile(r"input\.([A-Za-z_][A-Za-z0-9_]*)")


def _scan(text: str) -> Iterator[tuple[str, str]]:
    """Yield ('lit', text) and ('ref', key) pieces; raise on a malformed '$'."""
    i, buf = 0, []
    while i < len(text):
        ch = text[i]
        if ch != "$":
            buf.append(ch)
            i += 1
            continue
        if text.startswith("$$", i):
            buf.append("$")
            i += 2
            continue
        m = _REF.match(text, i + 1)
        if not m:
            raise FlowParseError(f"malformed template at offset {i} in {text!r}; expected $input.<key>")
        if buf:
            yield "lit", "".join(buf)
            buf = []
        yield "ref", m.group(1)
        i = m.end()
    if buf:
        yield "lit", "".join(buf)


def _walk_strings(value: Any, path: str) -> Iterator[tuple[str, str]]:
    if isinstance(value, str):
        yield path, value
    elif isinstance(value, Mapping):
        for k, v in value.items():
            yield from _walk_strings(v, f"{path}.{k}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            yield from _walk_strings(v, f"{path}[{i}]")


def template_refs(params: Any) -> set[str]:
    refs: set[str] = set()
    for _, text in _walk_strings(params, ""):
        refs |= {v for kind, v in _scan(text) if kind == "ref"}
    return refs


def render(value: Any, inputs: Mapping[str, Any]) -> Any:
    """Substitute ``$input.<key>`` references; a whole-string reference keeps the value's type."""
    if isinstance(value, str):
        pieces = list(_scan(value))
        if len(pieces) == 1 and pieces[0][0] == "ref":
            return inputs[pieces[0][1]]
        return "".join(v if kind == "lit" else str(inputs[v]) for kind, v in pieces)
    if isinstance(value, Mapping):
        return {k: render(v, inputs) for k, v in value.items()}
    if isinstance(value, list):
        return [render(v, inputs) for v in value]
    return value


# --- parsing ---------------------------------------------------------------


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise FlowParseError(f"duplicate key {k!r}")
        out[k] = v
    return out


_STATE_KEYS = {"kind", "provider", "params", "next", "on_failure", "max_retries", "retry_backoff", "role", "choice", "comment"}


def _target(raw: Any, where: str) -> str | None:
    if raw is None or isinstance(raw, str):
        return raw
    raise FlowParseError("state target must be a state name or null", where)


def _parse_state(name: str, raw: Any) -> ActionSpec:
    where = f"states.{name}"
    if not isinstance(raw, Mapping):
        raise FlowParseError("state must be an object", where)
    extra = set(raw) - _STATE_KEYS
    if extra:
        raise FlowParseError(f"unknown field {sorted(extra)[0]!r}", where)
    try:
        kind = ActionKind(raw.get("kind"))
    except ValueError:
        raise FlowParseError(f"unknown kind {raw.get('kind')!r}", f"{where}.kind") from None

    params = raw.get("params", {})
    if not isinstance(params, Mapping):
        raise FlowParseError("params must be an object", f"{where}.params")
    max_retries = raw.get("max_retries", DEFAULT_MAX_RETRIES)
    if isinstance(max_retries, bool) or not isinstance(max_retries, int) or max_retries < 1:
        raise FlowParseError("max_retries must be an integer >= 1", f"{where}.max_retries")
    backoff = raw.get("retry_backoff", DEFAULT_RETRY_BACKOFF_S)
    if isinstance(backoff, bool) or not isinstance(backoff, (int, float)) or backoff < 0:
        raise FlowParseError("retry_backoff must be a number >= 0", f"{where}.retry_backoff")

    choice = None
    if kind.terminal:
        for key in ("next", "on_failure", "provider", "choice"):
            if raw.get(key) is not None:
                raise FlowParseError(f"terminal state cannot have {key!r}", f"{where}.{key}")
    elif kind is ActionKind.CHOICE:
        for key in ("next", "provider"):
            if raw.get(key) is not None:
                raise FlowParseError(f"choice state cannot have {key!r}", f"{where}.{key}")
        choice = _parse_choice(raw.get("choice"), f"{where}.choice")
    else:
        if not isinstance(raw.get("provider"), str) or not raw["provider"]:
            raise FlowParseError("action states need a provider id", f"{where}.provider")
        if raw.get("choice") is not None:
            raise FlowParseError("only choice states carry a predicate", f"{where}.choice")

    return ActionSpec(
        name=name,
        kind=kind,
        provider=raw.get("provider"),
        params=params,
        next=_target(raw.get("next"), f"{where}.next"),
        on_failure=_target(raw.get("on_failure"), f"{where}.on_failure"),
        max_retries=max_retries,
        retry_backoff=float(backoff),
        role=raw.get("role"),
        choice=choice,
    )


def _parse_choice(raw: Any, where: str) -> ChoiceSpec:
    if not isinstance(raw, Mapping):
        raise FlowParseError("choice state needs a 'choice' object", where)
    variable, op, value = raw.get("variable"), raw.get("op"), raw.get("value")
    if not isinstance(variable, str) or "." not in variable:
        raise FlowParseError("variable must look like <state>.<output key>", f"{where}.variable")
    if op not in COMPARATORS:
        raise FlowParseError(f"op must be one of {sorted(COMPARATORS)}", f"{where}.op")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FlowParseError("value must be a number", f"{where}.value")
    then, otherwise = raw.get("then"), raw.get("else")
    if not isinstance(then, str) or not isinstance(otherwise, str):
        raise FlowParseError("choice needs 'then' and 'else' state names", where)
    return ChoiceSpec(variable, op, value, then, otherwise)


def flow_from_doc(doc: Mapping[str, Any]) -> FlowDefinition:
    if not isinstance(doc, Mapping):
        raise FlowParseError("flow document must be an object")
    flow_id, start, states_raw = doc.get("flow_id"), doc.get("start"), doc.get("states")
    if not isinstance(flow_id, str) or not flow_id:
        raise FlowParseError("flow_id must be a non-empty string", "flow_id")
    if not isinstance(states_raw, Mapping) or not states_raw:
        raise FlowParseError("states must be a non-empty object", "states")
    if not isinstance(start, str) or start not in states_raw:
        raise FlowParseError(f"start state {start!r} is not defined", "start")

    # Walk from start; only reachable states are validated.
    states: dict[str, ActionSpec] = {}
    order: list[str] = []
    stack = [start]
    while stack:
        name = stack.pop()
        if name in states:
            continue
        spec = _parse_state(name, states_raw[name])
        states[name] = spec
        order.append(name)
        for field_name, target in spec.targets():
            if target not in states_raw:
                raise FlowParseError(f"unknown state {target!r}", f"states.{name}.{field_name}")
            stack.append(target)
        if spec.choice is not None and spec.choice.source_state() not in states_raw:
            raise FlowParseError(
                f"unknown state {spec.choice.source_state()!r}", f"states.{name}.choice.variable"
            )
        for path, text in _walk_strings(spec.params, f"states.{name}.params"):
            try:
                list(_scan(text))
            except FlowParseError as exc:
                raise FlowParseError(str(exc), path) from None

    _check_acyclic(start, states)
    ordered = {name: states[name] for name in states_raw if name in states}
    return FlowDefinition(flow_id, start, ordered, document=json.loads(json.dumps(doc)))


def _check_acyclic(start: str, states: Mapping[str, ActionSpec]) -> None:
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(states, WHITE)

    def visit(name: str, path: list[str]) -> None:
        color[name] = GREY
        for _, target in states[name].targets():
            if color[target] == GREY:
                cycle = path[path.index(target):] + [target] if target in path else [name, target]
                raise FlowParseError(f"cycle: {' -> '.join(cycle)}", f"states.{name}")
            if color[target] == WHITE:
                visit(target, path + [target])
        color[name] = BLACK

    visit(start, [start])


def parse_flow(text: str) -> FlowDefinition:
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise FlowParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return flow_from_doc(doc)


def load_flow(path: str | Path) -> FlowDefinition:
    return parse_flow(Path(path).read_text())
