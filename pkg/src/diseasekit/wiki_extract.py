"""Section extraction from wikitext articles and aspect mapping.

An article whose title is in the disease vocabulary yields one passage per
section whose heading maps to a knowledge aspect, plus an Information passage
from the lead text before the first heading.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass

from .errors import SchemaError
from .mesh_vocab import DiseaseVocabulary, normalize_term


class Aspect(enum.Enum):
    INFORMATION = "Information"
    CAUSES = "Causes"
    SYMPTOMS = "Symptoms"
    DIAGNOSIS = "Diagnosis"
    TREATMENT = "Treatment"
    PREVENTION = "Prevention"
    PATHOPHYSIOLOGY = "Pathophysiology"
    TRANSMISSION = "Transmission"

    @property
    def surface_word(self) -> str:
        return self.value.lower()

    @classmethod
    def from_name(cls, name: str) -> "Aspect":
        return cls(name.capitalize() if name.islower() else name)


# Heading synonyms -> aspect; case-insensitive exact-phrase lookup.
# "screening" alone means Prevention; "screening and diagnosis" is Diagnosis.
DEFAULT_HEADING_SYNONYMS: dict[str, tuple[str, ...]] = {
    "Causes": ("cause", "causes", "etiology"),
    "Symptoms": (
        "symptoms",
        "signs and symptoms",
        "presentation",
        "clinical features",
    ),
    "Diagnosis": ("diagnosis", "screening and diagnosis", "testing"),
    "Treatment": ("treatment", "management", "therapy"),
    "Prevention": ("prevention", "screening"),
    "Pathophysiology": ("pathophysiology", "mechanism", "pathogenesis"),
    "Transmission": ("transmission", "spread"),
}


@dataclass(frozen=True)
class HeadingTable:
    """Phrase -> Aspect lookup built from a synonym mapping."""

    phrase_to_aspect: dict[str, Aspect]

    @classmethod
    def from_synonyms(
        cls, synonyms: dict[str, tuple[str, ...]] | None = None
    ) -> "HeadingTable":
        synonyms = synonyms if synonyms is not None else DEFAULT_HEADING_SYNONYMS
        table: dict[str, Aspect] = {}
        for aspect_name, phrases in synonyms.items():
            aspect = Aspect(aspect_name)
            for phrase in phrases:
                table.setdefault(normalize_term(phrase), aspect)
        return cls(phrase_to_aspect=table)

    @classmethod
    def from_json_file(cls, path) -> "HeadingTable":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.from_synonyms(
            {name: tuple(phrases) for name, phrases in raw.items()}
        )


@dataclass(frozen=True)
class Article:
    title: str
    lead: str
    sections: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class KnowledgePassage:
    """One (disease, aspect, text) triple harvested from an article."""

    disease: str
    aspect: Aspect
    text: str
    mentions_disease: bool
    mentions_aspect: bool


@dataclass(frozen=True)
class CorpusStats:
    passage_count: int
    per_aspect_counts: dict[str, int]
    both_mention_rate: float


HEADING_RE = re.compile(r"^(={2,})\s*(.*?)\s*\1\s*$")


def parse_sections(raw_text: str) -> Article:
    """Split wikitext into a lead and top-level sections.

    A heading is a line of the form ``== Title ==`` (two or more equals
    signs).  Sub-section text (level three and deeper) is concatenated into
    the enclosing top-level section; sub-heading lines themselves are
    dropped.  Text before the first heading becomes the lead.
    """
    lead_parts: list[str] = []
    sections: list[tuple[str, list[str]]] = []
    current: list[str] | None = None
    for line in raw_text.splitlines():
        match = HEADING_RE.match(line)
        if match:
            level = len(match.group(1))
            heading = match.group(2)
            if level == 2 and heading:
                sections.append((heading, []))
                current = sections[-1][1]
            # deeper headings vanish; their text stays in the open section
            continue
        if current is None:
            lead_parts.append(line)
        else:
            current.append(line)
    return Article(
        title="",
        lead="\n".join(lead_parts).strip("\n"),
        sections=tuple(
            (heading, "\n".join(body).strip("\n")) for heading, body in sections
        ),
    )


def parse_article(title: str, raw_text: str) -> Article:
    parsed = parse_sections(raw_text)
    return Article(title=title, lead=parsed.lead, sections=parsed.sections)


_REF_RE = re.compile(r"<ref[^>/]*/>|<ref[^>]*>.*?</ref>", re.DOTALL | re.IGNORECASE)
_TEMPLATE_RE = re.compile(r"\{\{[^{}]*\}\}", re.DOTALL)
_PIPED_LINK_RE = re.compile(r"\[\[[^\[\]|]*\|([^\[\]]*)\]\]")
_PLAIN_LINK_RE = re.compile(r"\[\[([^\[\]]*)\]\]")


def clean_markup(text: str) -> str:
    """Minimal wikitext cleaner: refs and templates go, links keep labels."""
    text = _REF_RE.sub("", text)
    while True:
        stripped = _TEMPLATE_RE.sub("", text)
        if stripped == text:
            break
        text = stripped
    text = _PIPED_LINK_RE.sub(r"\1", text)
    text = _PLAIN_LINK_RE.sub(r"\1", text)
    return text


def normalize_passage_text(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def map_heading_to_aspect(
    heading: str, table: HeadingTable | None = None
) -> Aspect | None:
    table = table or HeadingTable.from_synonyms()
    return table.phrase_to_aspect.get(normalize_term(heading))


def _mentions(needle: str, text: str) -> bool:
    return normalize_term(needle) in normalize_term(text)


def make_passage(disease: str, aspect: Aspect, text: str) -> KnowledgePassage:
    return KnowledgePassage(
        disease=disease,
        aspect=aspect,
        text=text,
        mentions_disease=_mentions(disease, text),
        mentions_aspect=_mentions(aspect.surface_word, text),
    )


def extract_passages(
    article: Article,
    vocab: DiseaseVocabulary,
    table: HeadingTable | None = None,
) -> list[KnowledgePassage]:
    """Emit passages for a vocabulary-gated article.

    The lead becomes an Information passage when non-empty; each section
    whose heading maps to an aspect becomes one passage.  Sections whose
    cleaned body is empty are skipped.
    """
    if normalize_term(article.title) not in vocab:
        return []
    table = table or HeadingTable.from_synonyms()
    passages: list[KnowledgePassage] = []
    lead = normalize_passage_text(clean_markup(article.lead))
    if lead:
        passages.append(make_passage(article.title, Aspect.INFORMATION, lead))
    for heading, body in article.sections:
        aspect = map_heading_to_aspect(heading, table)
        if aspect is None:
            continue
        text = normalize_passage_text(clean_markup(body))
        if not text:
            continue
        passages.append(make_passage(article.title, aspect, text))
    return passages


_ASPECT_ORDER = {aspect: i for i, aspect in enumerate(Aspect)}


def merge_passages(
    per_article: list[list[KnowledgePassage]],
) -> list[KnowledgePassage]:
    """Deterministic corpus order: by article title, then aspect catalog order."""
    merged = [p for passages in per_article for p in passages]
    merged.sort(key=lambda p: (p.disease, _ASPECT_ORDER[p.aspect]))
    return merged


def corpus_stats(passages: list[KnowledgePassage]) -> CorpusStats:
    per_aspect = {aspect.value: 0 for aspect in Aspect}
    both = 0
    for p in passages:
        per_aspect[p.aspect.value] += 1
        if p.mentions_disease and p.mentions_aspect:
            both += 1
    count = len(passages)
    return CorpusStats(
        passage_count=count,
        per_aspect_counts=per_aspect,
        both_mention_rate=both / count if count else 0.0,
    )


def passage_to_json(p: KnowledgePassage) -> dict:
    return {
        "disease": p.disease,
        "aspect": p.aspect.value,
        "text": p.text,
        "mentions_disease": p.mentions_disease,
        "mentions_aspect": p.mentions_aspect,
    }


def passage_from_json(obj: dict, line_number: int | None = None) -> KnowledgePassage:
    try:
        return KnowledgePassage(
            disease=obj["disease"],
            aspect=Aspect(obj["aspect"]),
            text=obj["text"],
            mentions_disease=bool(obj["mentions_disease"]),
            mentions_aspect=bool(obj["mentions_aspect"]),
        )
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"bad passage record: {exc}", line_number) from exc


def write_passages(passages: list[KnowledgePassage], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            fh.write(json.dumps(passage_to_json(p), ensure_ascii=False) + "\n")


def read_passages(path) -> list[KnowledgePassage]:
    passages = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"bad JSON: {exc.msg}", i) from exc
            passages.append(passage_from_json(obj, i))
    return passages
