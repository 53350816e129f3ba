"""Domain model: table schemas, papers, benchmark instances.

A schema is an ordered mapping of aspect name -> (definition, output format).
Order is semantic (tables read left to right), so equality is order-sensitive
and serialization preserves insertion order. The JSON wire format is a single
object::

    {"<aspect name>": {"definition": "...", "output_format": "..."}, ...}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import (
    DuplicateAspect,
    MalformedJson,
    MissingField,
    TooFewAspects,
)

STRICT = "strict"
RELAXED = "relaxed"

# Minimum aspect count for a schema accepted as a final generation output.
MIN_FINAL_ASPECTS = 2


@dataclass(frozen=True)
class Aspect:
    name: str
    definition: str
    output_format: str

    def __post_init__(self):
        if not self.name:
            raise MalformedJson("aspect name must be non-empty")


@dataclass(frozen=True)
class AspectSchema:
    """Ordered, name-unique collection of aspects."""

    aspects: tuple[Aspect, ...] = ()

    def __post_init__(self):
        seen = set()
        for a in self.aspects:
            if a.name in seen:
                raise DuplicateAspect(a.name)
            seen.add(a.name)

    def __len__(self) -> int:
        return len(self.aspects)

    def names(self) -> list[str]:
        return [a.name for a in self.aspects]

    def get(self, name: str) -> Aspect | None:
        for a in self.aspects:
            if a.name == name:
                return a
        return None

    def without(self, name: str) -> "AspectSchema":
        return AspectSchema(tuple(a for a in self.aspects if a.name != name))

    def append(self, aspect: Aspect) -> "AspectSchema":
        return AspectSchema(self.aspects + (aspect,))

    def validate(self, mode: str = STRICT) -> None:
        if mode not in (STRICT, RELAXED):
            raise ValueError(f"unknown validation mode {mode!r}")
        if mode == STRICT and len(self.aspects) < MIN_FINAL_ASPECTS:
            raise TooFewAspects(
                f"final schema needs at least {MIN_FINAL_ASPECTS} aspects, got {len(self.aspects)}"
            )

    @classmethod
    def from_items(cls, items) -> "AspectSchema":
        """Build from an iterable of (name, definition, output_format) triples."""
        return cls(tuple(Aspect(n, d, f) for n, d, f in items))


def _coerce_text(value) -> str:
    if isinstance(value, str):
        return value
    # LLMs occasionally emit nested structures or numbers for text fields;
    # canonicalize rather than reject.
    return json.dumps(value, ensure_ascii=False)


def _pairs_rejecting_duplicates(pairs):
    # Used only for the top level: duplicate aspect names must be rejected,
    # not silently last-wins like plain json.loads.
    keys = [k for k, _ in pairs]
    for k in keys:
        if keys.count(k) > 1:
            raise DuplicateAspect(k)
    return dict(pairs)


def parse_schema(text: str, mode: str = STRICT) -> AspectSchema:
    """Parse the JSON wire format into an AspectSchema.

    Extra keys inside aspect objects are ignored; duplicate aspect names are
    rejected in both modes; strict mode additionally enforces the final-output
    aspect minimum.
    """
    try:
        raw = json.loads(text, object_pairs_hook=_pairs_rejecting_duplicates)
    except DuplicateAspect:
        raise
    except (json.JSONDecodeError, ValueError) as exc:
        raise MalformedJson(f"schema is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedJson(f"schema must be a JSON object, got {type(raw).__name__}")

    aspects = []
    for name, body in raw.items():
        if not isinstance(name, str) or not name:
            raise MalformedJson("aspect names must be non-empty strings")
        if not isinstance(body, dict):
            raise MissingField(name, "definition")
        if "definition" not in body:
            raise MissingField(name, "definition")
        if "output_format" not in body:
            raise MissingField(name, "output_format")
        aspects.append(
            Aspect(name, _coerce_text(body["definition"]), _coerce_text(body["output_format"]))
        )
    schema = AspectSchema(tuple(aspects))
    schema.validate(mode)
    return schema


def serialize_schema(schema: AspectSchema) -> str:
    """Canonical JSON emission: aspects in stored order, exactly the keys
    `definition` and `output_format` per aspect."""
    obj = {
        a.name: {"definition": a.definition, "output_format": a.output_format}
        for a in schema.aspects
    }
    return json.dumps(obj, ensure_ascii=False, indent=2)


_WS_RUN = re.compile(r"\s+")


def _collapse(text: str) -> str:
    return _WS_RUN.sub(" ", text).strip()


def aspect_fingerprint(name: str, definition: str, output_format: str) -> str:
    """Canonical flat text for one aspect, used by every similarity scorer.

    Joined as ``name + ". " + definition + " " + output_format`` with all
    whitespace runs collapsed to single spaces, so prompt-formatting noise
    cannot shift scores.
    """
    if not _collapse(name):
        raise MalformedJson("fingerprint requires a non-empty aspect name")
    joined = f"{_collapse(name)}. {_collapse(definition)} {_collapse(output_format)}"
    return _WS_RUN.sub(" ", joined)


def schema_fingerprints(schema: AspectSchema) -> list[str]:
    return [aspect_fingerprint(a.name, a.definition, a.output_format) for a in schema.aspects]


@dataclass(frozen=True)
class PaperRecord:
    paper_id: str
    title: str
    abstract: str = ""
    full_text: str | None = None
    citation_key: str | None = None

    def __post_init__(self):
        if not self.title:
            raise MalformedJson(f"paper {self.paper_id!r} has an empty title")


@dataclass(frozen=True)
class IntentCandidate:
    goal: str
    justification: str = ""

    def __post_init__(self):
        if not self.goal:
            raise MalformedJson("intent candidate goal must be non-empty")


@dataclass(frozen=True)
class TableInstance:
    """One benchmark row: the papers being compared plus everything known
    about the table they came from."""

    instance_id: str
    papers: tuple[PaperRecord, ...]
    caption: str | None = None
    in_text_refs: tuple[str, ...] | None = None
    intent: str | None = None
    reference_schema: AspectSchema | None = None
    table_values: str | None = None
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.papers) < 1:
            raise MalformedJson(f"instance {self.instance_id!r} has no papers")
        ids = [p.paper_id for p in self.papers]
        if len(set(ids)) != len(ids):
            raise MalformedJson(f"instance {self.instance_id!r} has duplicate paper ids")
        if self.reference_schema is not None:
            self.reference_schema.validate(RELAXED)

    @property
    def paper_count(self) -> int:
        return len(self.papers)
