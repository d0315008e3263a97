"""Knowledge base of common LLM-generated Chisel errors.

Each entry pairs a recognizable compiler-message pattern with a cause
explanation and fix guidance that is injected into review prompts.  The
catalog lives in a data file so users can extend it without code changes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

from .domain import ErrorEntry

_VALID_CLASS_IDS = tuple(
    ["A1", "A2", "A3"] + [f"B{i}" for i in range(1, 8)] + ["C1", "C2"]
)


class CatalogError(ValueError):
    """Raised when the catalog data file fails validation."""


@dataclass(frozen=True)
class CatalogEntry:
    class_id: str
    description: str
    incorrect_snippet: str
    corrected_snippet: str
    signature_patterns: tuple[str, ...]
    cause: str
    fix_guidance: str

    @property
    def compiled_patterns(self) -> tuple[re.Pattern[str], ...]:
        return _compile_patterns(self.signature_patterns)


@lru_cache(maxsize=None)
def _compile_patterns(patterns: tuple[str, ...]) -> tuple[re.Pattern[str], ...]:
    return tuple(re.compile(p) for p in patterns)


def _parse_entry(raw: dict, index: int) -> CatalogEntry:
    try:
        entry = CatalogEntry(
            class_id=raw["class_id"],
            description=raw["description"],
            incorrect_snippet=raw["incorrect_snippet"],
            corrected_snippet=raw["corrected_snippet"],
            signature_patterns=tuple(raw["signature_patterns"]),
            cause=raw["cause"],
            fix_guidance=raw["fix_guidance"],
        )
    except KeyError as exc:
        raise CatalogError(f"catalog entry #{index}: missing field {exc}") from None
    if entry.class_id not in _VALID_CLASS_IDS:
        raise CatalogError(f"catalog entry #{index}: unknown class_id {entry.class_id!r}")
    if not entry.signature_patterns:
        raise CatalogError(f"catalog entry {entry.class_id}: needs >= 1 signature pattern")
    try:
        entry.compiled_patterns
    except re.error as exc:
        raise CatalogError(f"catalog entry {entry.class_id}: bad pattern: {exc}") from None
    return entry


def load_catalog(path: str | Path | None = None) -> tuple[CatalogEntry, ...]:
    """Load and validate a catalog file; defaults to the bundled one.

    Entries are returned in fixed class-id order, which is also the match
    precedence order.
    """
    if path is None:
        text = resources.files("chiselsmith").joinpath("data/catalog.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"catalog is not valid JSON: {exc}") from None
    if not isinstance(data, dict) or not isinstance(data.get("entries"), list):
        raise CatalogError("catalog must be an object with an 'entries' list")
    entries = [_parse_entry(raw, i) for i, raw in enumerate(data["entries"])]
    seen: set[str] = set()
    for entry in entries:
        if entry.class_id in seen:
            raise CatalogError(f"duplicate class_id {entry.class_id}")
        seen.add(entry.class_id)
    return tuple(sorted(entries, key=lambda e: e.class_id))


@lru_cache(maxsize=1)
def default_catalog() -> tuple[CatalogEntry, ...]:
    return load_catalog()


def match_catalog(
    entry: ErrorEntry, catalog: tuple[CatalogEntry, ...] | None = None
) -> CatalogEntry | None:
    """First catalog entry (in class-id order) whose pattern hits the message."""
    return match_message(entry.message, catalog)


def match_message(
    message: str, catalog: tuple[CatalogEntry, ...] | None = None
) -> CatalogEntry | None:
    for candidate in catalog if catalog is not None else default_catalog():
        if any(p.search(message) for p in candidate.compiled_patterns):
            return candidate
    return None


def guidance_for(
    entries: Iterable[ErrorEntry], catalog: tuple[CatalogEntry, ...] | None = None
) -> list[CatalogEntry]:
    """Deduplicated guidance for all matched classes, ordered by class id."""
    cat = catalog if catalog is not None else default_catalog()
    by_id = {c.class_id: c for c in cat}
    hit_ids = {e.catalog_class for e in entries if e.catalog_class in by_id}
    return [by_id[cid] for cid in sorted(hit_ids)]
