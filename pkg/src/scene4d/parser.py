"""Command parameterizer: natural language -> ExecutionPlan.

The default path is a deterministic grammar over shipped lexicons (TSV data
files, one ``surface<TAB>canonical`` entry per line). An optional backend
client can produce plans remotely against the same JSON schema; invalid or
unreachable backends fall back to the grammar and mark the plan provenance.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

import requests

from .errors import ParseError, PlanValidationError

log = logging.getLogger(__name__)

_ARTICLES = {"the", "a", "an"}


class Module(str, Enum):
    GEN = "GEN"
    EDIT = "EDIT"


class Direction(str, Enum):
    LEFT_TO_RIGHT = "left_to_right"
    RIGHT_TO_LEFT = "right_to_left"
    UP = "up"
    DOWN = "down"
    TOWARD_CAMERA = "toward_camera"
    AWAY = "away"


class Speed(str, Enum):
    SLOW = "slow"
    NORMAL = "normal"
    FAST = "fast"


class EditVerb(str, Enum):
    RECOLOR = "recolor"
    REMOVE = "remove"
    EXTRACT = "extract"


@dataclass(frozen=True)
class GenQueries:
    object_phrase: str
    direction: Direction = Direction.LEFT_TO_RIGHT
    speed: Speed = Speed.NORMAL
    color: str | None = None
    scene_phrase: str = ""


@dataclass(frozen=True)
class EditQueries:
    verb: EditVerb
    target_phrase: str
    new_color: str | None = None


@dataclass(frozen=True)
class ExecutionPlan:
    module: Module
    queries: GenQueries | EditQueries
    provenance: str = "grammar"

    def __post_init__(self):
        if self.module is Module.GEN and not isinstance(self.queries, GenQueries):
            raise PlanValidationError("GEN plan requires generation queries")
        if self.module is Module.EDIT:
            if not isinstance(self.queries, EditQueries):
                raise PlanValidationError("EDIT plan requires edit queries")
            if self.queries.verb is EditVerb.RECOLOR and not self.queries.new_color:
                raise PlanValidationError("recolor requires new_color")

    def to_dict(self) -> dict:
        if self.module is Module.GEN:
            q = {
                "object_phrase": self.queries.object_phrase,
                "direction": self.queries.direction.value,
                "speed": self.queries.speed.value,
                "color": self.queries.color,
                "scene_phrase": self.queries.scene_phrase,
            }
        else:
            q = {
                "verb": self.queries.verb.value,
                "target_phrase": self.queries.target_phrase,
                "new_color": self.queries.new_color,
            }
        return {"module": self.module.value, "queries": q,
                "provenance": self.provenance}


PLAN_SCHEMA = {
    "type": "object",
    "required": ["module", "queries"],
    "properties": {
        "module": {"enum": ["GEN", "EDIT"]},
        "queries": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["object_phrase"],
                    "properties": {
                        "object_phrase": {"type": "string", "minLength": 1},
                        "direction": {"enum": [d.value for d in Direction]},
                        "speed": {"enum": [s.value for s in Speed]},
                        "color": {"type": ["string", "null"]},
                        "scene_phrase": {"type": "string"},
                    },
                },
                {
                    "type": "object",
                    "required": ["verb", "target_phrase"],
                    "properties": {
                        "verb": {"enum": [v.value for v in EditVerb]},
                        "target_phrase": {"type": "string", "minLength": 1},
                        "new_color": {"type": ["string", "null"]},
                    },
                },
            ]
        },
    },
}

_GEN_KEYS = {"object_phrase", "direction", "speed", "color", "scene_phrase"}
_EDIT_KEYS = {"verb", "target_phrase", "new_color"}


def plan_from_dict(data: dict, provenance: str = "grammar") -> ExecutionPlan:
    """Validate a plan payload against the schema and build an ExecutionPlan."""
    if not isinstance(data, dict):
        raise PlanValidationError("plan payload must be an object")
    module = data.get("module")
    if module not in (m.value for m in Module):
        raise PlanValidationError(f"module must be GEN or EDIT, got {module!r}")
    queries = data.get("queries")
    if not isinstance(queries, dict):
        raise PlanValidationError("queries must be an object")
    if module == Module.GEN.value:
        extra = set(queries) - _GEN_KEYS
        if extra:
            raise PlanValidationError(f"unknown GEN query fields: {sorted(extra)}")
        obj = queries.get("object_phrase")
        if not isinstance(obj, str) or not obj:
            raise PlanValidationError("object_phrase must be a nonempty string")
        direction = queries.get("direction", Direction.LEFT_TO_RIGHT.value)
        if direction not in (d.value for d in Direction):
            raise PlanValidationError(f"unknown direction {direction!r}")
        speed = queries.get("speed", Speed.NORMAL.value)
        if speed not in (s.value for s in Speed):
            raise PlanValidationError(f"unknown speed {speed!r}")
        color = queries.get("color")
        if color is not None and not isinstance(color, str):
            raise PlanValidationError("color must be a string or null")
        scene_phrase = queries.get("scene_phrase", "")
        if not isinstance(scene_phrase, str):
            raise PlanValidationError("scene_phrase must be a string")
        return ExecutionPlan(
            module=Module.GEN,
            queries=GenQueries(
                object_phrase=obj, direction=Direction(direction),
                speed=Speed(speed), color=color, scene_phrase=scene_phrase,
            ),
            provenance=provenance,
        )
    extra = set(queries) - _EDIT_KEYS
    if extra:
        raise PlanValidationError(f"unknown EDIT query fields: {sorted(extra)}")
    verb = queries.get("verb")
    if verb not in (v.value for v in EditVerb):
        raise PlanValidationError(f"unknown edit verb {verb!r}")
    target = queries.get("target_phrase")
    if not isinstance(target, str) or not target:
        raise PlanValidationError("target_phrase must be a nonempty string")
    new_color = queries.get("new_color")
    if new_color is not None and not isinstance(new_color, str):
        raise PlanValidationError("new_color must be a string or null")
    if verb == EditVerb.RECOLOR.value and not new_color:
        raise PlanValidationError("recolor requires new_color")
    return ExecutionPlan(
        module=Module.EDIT,
        queries=EditQueries(verb=EditVerb(verb), target_phrase=target,
                            new_color=new_color),
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# lexicons
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def load_lexicon(name: str) -> dict[str, str]:
    text = resources.files("scene4d.data").joinpath(f"{name}.tsv").read_text("utf-8")
    entries: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        surface, canonical = line.split("\t")
        entries[surface] = canonical
    return entries


@lru_cache(maxsize=None)
def named_colors() -> dict[str, tuple[float, float, float]]:
    text = resources.files("scene4d.data").joinpath("color_rgb.tsv").read_text("utf-8")
    table: dict[str, tuple[float, float, float]] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        name, r, g, b = line.split("\t")
        table[name] = (float(r), float(g), float(b))
    return table


def _tokenize(command: str) -> list[str]:
    text = command.lower()
    text = re.sub(r"['’]s\b", "", text)
    text = re.sub(r"[.,!?;:\"()]", " ", text)
    return text.split()


def _find_subsequence(tokens: list[str], phrase: list[str]) -> int | None:
    n = len(phrase)
    for i in range(len(tokens) - n + 1):
        if tokens[i:i + n] == phrase:
            return i
    return None


def _strip_articles(tokens: list[str]) -> list[str]:
    out = list(tokens)
    while out and out[0] in _ARTICLES:
        out.pop(0)
    return out


# ---------------------------------------------------------------------------
# grammar parser
# ---------------------------------------------------------------------------

def parse(command: str) -> ExecutionPlan:
    """Parse a command deterministically.

    Routing: an edit verb at the clause head selects EDIT; anything else is
    GEN. Colors, speeds, and directions come from the shipped lexicons;
    compound direction phrases are matched longest-first on word boundaries.
    """
    if not isinstance(command, str) or not command.strip():
        raise ParseError("empty command")
    tokens = _tokenize(command)
    if not tokens:
        raise ParseError("command contains no words")
    edit_verbs = load_lexicon("edit_verbs")
    if tokens[0] in edit_verbs:
        return _parse_edit(EditVerb(edit_verbs[tokens[0]]), tokens[1:])
    return _parse_gen(tokens)


def _parse_edit(verb: EditVerb, toks: list[str]) -> ExecutionPlan:
    colors = load_lexicon("colors")
    new_color: str | None = None
    if verb is EditVerb.RECOLOR:
        if "to" in toks:
            idx = len(toks) - 1 - toks[::-1].index("to")
            tail = toks[idx + 1:]
            target_toks = toks[:idx]
            if not tail:
                raise ParseError("recolor command is missing the new_color slot")
            new_color = colors.get(" ".join(tail), colors.get(tail[-1], " ".join(tail)))
        elif toks and toks[-1] in colors:
            new_color = colors[toks[-1]]
            target_toks = toks[:-1]
        else:
            raise ParseError("recolor command is missing the new_color slot")
    else:
        target_toks = list(toks)
        # "remove X from the scene" style tail
        if "from" in target_toks:
            target_toks = target_toks[: target_toks.index("from")]
    if target_toks[:3] == ["the", "color", "of"] or target_toks[:2] == ["color", "of"]:
        target_toks = target_toks[3 if target_toks[0] == "the" else 2:]
    target_toks = _strip_articles(target_toks)
    while target_toks and target_toks[-1] == "color":
        target_toks.pop()
    if not target_toks:
        raise ParseError(
            f"edit verb {verb.value!r} has no resolvable target_phrase"
        )
    return ExecutionPlan(
        module=Module.EDIT,
        queries=EditQueries(verb=verb, target_phrase=" ".join(target_toks),
                            new_color=new_color),
    )


def _parse_gen(tokens: list[str]) -> ExecutionPlan:
    directions = load_lexicon("directions")
    speeds = load_lexicon("speeds")
    colors = load_lexicon("colors")
    motion_verbs = load_lexicon("motion_verbs")

    toks = list(tokens)

    # direction: longest surface form first, matched as a token subsequence
    direction: Direction | None = None
    for surface in sorted(directions, key=lambda s: -len(s.split())):
        phrase = surface.split()
        pos = _find_subsequence(toks, phrase)
        if pos is not None:
            direction = Direction(directions[surface])
            del toks[pos:pos + len(phrase)]
            break
    if direction is None:
        for i, t in enumerate(toks):
            if t == "to" and i + 2 < len(toks) + 1:
                rest = toks[i + 1:i + 3]
                if rest[:1] == ["the"] and len(rest) == 2:
                    accepted = ", ".join(sorted(directions))
                    raise ParseError(
                        f"unknown direction phrase 'to the {rest[1]}'; "
                        f"accepted phrases: {accepted}"
                    )
        direction = Direction.LEFT_TO_RIGHT

    speed = Speed.NORMAL
    for i, t in enumerate(toks):
        if t in speeds:
            speed = Speed(speeds[t])
            del toks[i]
            break

    # noun phrase: tokens after the leading article up to the first motion verb
    toks = _strip_articles(toks)
    np_tokens: list[str] = []
    rest: list[str] = []
    for i, t in enumerate(toks):
        if t in motion_verbs:
            rest = toks[i + 1:]
            break
        np_tokens.append(t)
    if not np_tokens:
        raise ParseError("could not find an object phrase in the command")
    color = next((colors[t] for t in np_tokens if t in colors), None)
    heads = [t for t in np_tokens if t not in colors and t != "and"]
    object_phrase = heads[-1] if heads else np_tokens[-1]

    while rest and rest[0] in motion_verbs:
        rest.pop(0)
    scene_phrase = " ".join(rest).strip()

    return ExecutionPlan(
        module=Module.GEN,
        queries=GenQueries(
            object_phrase=object_phrase, direction=direction, speed=speed,
            color=color, scene_phrase=scene_phrase,
        ),
    )


# ---------------------------------------------------------------------------
# backend adapter
# ---------------------------------------------------------------------------

class LlmPlanBackend:
    """HTTP client for a plan-producing service.

    Wire contract: POST ``{command, schema}`` as JSON; the response body must
    be a plan document satisfying PLAN_SCHEMA.
    """

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def plan(self, command: str, schema: dict) -> dict:
        resp = requests.post(
            self.url, json={"command": command, "schema": schema},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        return resp.json()


def parse_with_backend(command: str, backend) -> ExecutionPlan:
    """Parse via a backend client, falling back to the grammar on failure.

    A schema-invalid response is logged as a validation error before the
    fallback; network failures and timeouts fall back silently. Fallback
    plans carry ``provenance="fallback"``.
    """
    try:
        raw = backend.plan(command, PLAN_SCHEMA)
    except (requests.RequestException, OSError, TimeoutError, ValueError) as exc:
        log.warning("plan backend unreachable (%s); using grammar parser", exc)
        return _fallback(command)
    try:
        return plan_from_dict(raw, provenance="backend")
    except PlanValidationError as exc:
        log.warning("plan backend returned invalid plan (%s); using grammar", exc)
        return _fallback(command)


def _fallback(command: str) -> ExecutionPlan:
    plan = parse(command)
    return ExecutionPlan(module=plan.module, queries=plan.queries,
                         provenance="fallback")
