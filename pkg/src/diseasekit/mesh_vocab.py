"""MeSH descriptor parsing and disease-vocabulary construction.

Descriptors are read either from the official XML layout
(DescriptorRecord / DescriptorUI / DescriptorName / TreeNumberList) or from a
simplified JSON fixture layout (array of {"id", "term", "tree_numbers"}).
A descriptor contributes to the vocabulary when at least one of its tree
numbers falls in an included branch (defaults: C01..C26 plus F01).
"""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from .errors import FormatError, ParseError, ValidationError

TREE_NUMBER_RE = re.compile(r"^[A-Z][0-9]+(\.[0-9A-Za-z]+)*$")
BRANCH_PREFIX_RE = re.compile(r"^[A-Z][0-9]{2}$")

DEFAULT_BRANCH_PREFIXES = tuple(f"C{n:02d}" for n in range(1, 27)) + ("F01",)


@dataclass(frozen=True)
class DescriptorRecord:
    """One MeSH descriptor: unique id, preferred term, tree placements."""

    unique_id: str
    preferred_term: str
    tree_numbers: tuple[str, ...]
    synonyms: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.unique_id:
            raise ValidationError("descriptor has empty unique_id")
        if not self.tree_numbers:
            raise ValidationError(
                f"descriptor {self.unique_id} has no tree numbers"
            )
        for tn in self.tree_numbers:
            if not TREE_NUMBER_RE.match(tn):
                raise ValidationError(
                    f"descriptor {self.unique_id}: bad tree number {tn!r}"
                )


@dataclass(frozen=True)
class BranchSpec:
    """Top-level tree prefixes whose descriptors count as diseases."""

    included_prefixes: tuple[str, ...] = DEFAULT_BRANCH_PREFIXES

    def __post_init__(self):
        seen = set()
        for prefix in self.included_prefixes:
            if not BRANCH_PREFIX_RE.match(prefix):
                raise ValidationError(f"bad branch prefix {prefix!r}")
            if prefix in seen:
                raise ValidationError(f"duplicate branch prefix {prefix!r}")
            seen.add(prefix)


@dataclass(frozen=True)
class DiseaseVocabulary:
    """Normalized disease terms, ordered lexicographically."""

    terms: tuple[str, ...]
    source_count: int
    term_count: int = field(default=-1)

    def __post_init__(self):
        if self.term_count == -1:
            object.__setattr__(self, "term_count", len(self.terms))
        if self.term_count != len(self.terms):
            raise ValidationError("term_count disagrees with terms")

    def __contains__(self, term: str) -> bool:
        return term in self._term_set

    @property
    def _term_set(self) -> frozenset[str]:
        cached = getattr(self, "_cached_set", None)
        if cached is None:
            cached = frozenset(self.terms)
            object.__setattr__(self, "_cached_set", cached)
        return cached


def normalize_term(term: str) -> str:
    """Lowercase, trim, and collapse internal whitespace; hyphens survive."""
    return re.sub(r"\s+", " ", term.lower()).strip()


def in_branch(tree_number: str, spec: BranchSpec) -> bool:
    """True when the segment before the first dot is an included prefix."""
    if not TREE_NUMBER_RE.match(tree_number):
        raise ValidationError(f"bad tree number syntax {tree_number!r}")
    prefix = tree_number.split(".", 1)[0]
    return prefix in spec.included_prefixes


def parse_mesh_descriptors(
    text: str, layout: str = "auto"
) -> list[DescriptorRecord]:
    """Parse descriptor records from XML or the JSON fixture layout.

    ``layout`` is "xml", "json", or "auto" (sniff the first non-space
    character).  Records with zero tree numbers are emitted as-is; callers
    decide how to flag them.
    """
    if layout == "auto":
        head = text.lstrip()[:1]
        if head == "<":
            layout = "xml"
        elif head in ("[", "{"):
            layout = "json"
        else:
            raise FormatError("input is neither XML nor JSON descriptor layout")
    if layout == "xml":
        return _parse_xml(text)
    if layout == "json":
        return _parse_json(text)
    raise FormatError(f"unknown descriptor layout {layout!r}")


def _byte_offset(text: str, line: int, column: int) -> int:
    lines = text.splitlines(keepends=True)
    prefix = "".join(lines[: line - 1])
    return len(prefix.encode("utf-8")) + column


def _parse_xml(text: str) -> list[DescriptorRecord]:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line, column = exc.position
        raise ParseError(
            f"malformed descriptor XML: {exc.msg if hasattr(exc, 'msg') else exc}",
            offset=_byte_offset(text, line, column),
        ) from exc
    records = []
    nodes = root.iter("DescriptorRecord")
    if root.tag == "DescriptorRecord":
        nodes = [root]
    for node in nodes:
        unique_id = (node.findtext("DescriptorUI") or "").strip()
        term = (node.findtext("DescriptorName/String") or "").strip()
        trees = tuple(
            (tn.text or "").strip()
            for tn in node.findall("TreeNumberList/TreeNumber")
        )
        synonyms = []
        for syn in node.findall("ConceptList/Concept/TermList/Term/String"):
            surface = (syn.text or "").strip()
            if surface and surface != term:
                synonyms.append(surface)
        records.append(
            DescriptorRecord(unique_id, term, trees, tuple(synonyms))
        )
    return records


def _parse_json(text: str) -> list[DescriptorRecord]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"malformed descriptor JSON: {exc.msg}", offset=exc.pos
        ) from exc
    if not isinstance(data, list):
        raise FormatError("JSON descriptor layout must be an array of objects")
    records = []
    for i, obj in enumerate(data):
        if not isinstance(obj, dict) or "id" not in obj or "term" not in obj:
            raise FormatError(f"descriptor #{i} lacks required id/term fields")
        records.append(
            DescriptorRecord(
                unique_id=str(obj["id"]),
                preferred_term=str(obj["term"]),
                tree_numbers=tuple(obj.get("tree_numbers", [])),
                synonyms=tuple(obj.get("synonyms", [])),
            )
        )
    return records


def build_disease_vocabulary(
    records: list[DescriptorRecord],
    spec: BranchSpec | None = None,
    include_synonyms: bool = False,
) -> DiseaseVocabulary:
    """Collect normalized terms of records with an in-branch tree number.

    Only the preferred term is taken unless ``include_synonyms`` is set.
    Duplicate normalized forms collapse; output order is lexicographic.
    """
    spec = spec or BranchSpec()
    terms: set[str] = set()
    for record in records:
        if not any(in_branch(tn, spec) for tn in record.tree_numbers):
            continue
        surfaces = [record.preferred_term]
        if include_synonyms:
            surfaces.extend(record.synonyms)
        for surface in surfaces:
            normalized = normalize_term(surface)
            if normalized:
                terms.add(normalized)
    return DiseaseVocabulary(
        terms=tuple(sorted(terms)), source_count=len(records)
    )


def parse_branch_arg(arg: str) -> BranchSpec:
    """Parse a CLI branch list like "C01-C26,F01" into a BranchSpec."""
    prefixes: list[str] = []
    for part in arg.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            if not (BRANCH_PREFIX_RE.match(lo) and BRANCH_PREFIX_RE.match(hi)):
                raise ValidationError(f"bad branch range {part!r}")
            if lo[0] != hi[0]:
                raise ValidationError(f"branch range {part!r} mixes letters")
            for n in range(int(lo[1:]), int(hi[1:]) + 1):
                prefixes.append(f"{lo[0]}{n:02d}")
        else:
            prefixes.append(part)
    return BranchSpec(included_prefixes=tuple(prefixes))


def write_vocabulary(vocab: DiseaseVocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for term in vocab.terms:
            fh.write(term + "\n")


def read_vocabulary(path) -> DiseaseVocabulary:
    with open(path, encoding="utf-8") as fh:
        terms = [line.rstrip("\n") for line in fh if line.strip()]
    return DiseaseVocabulary(terms=tuple(terms), source_count=len(terms))
