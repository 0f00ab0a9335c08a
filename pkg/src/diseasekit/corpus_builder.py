"""Masked training-example construction from knowledge passages.

Default mode prepends a templated auxiliary question ("What is the {aspect}
of {disease}?") to the passage and masks every sub-word of the disease and
aspect inside it, so the cloze rendering is identical across aspects and
leaks no answer.  Ablation modes drop parts of that recipe.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError, ValidationError
from .tokenizer import (
    CLS,
    CLS_ID,
    MASK,
    MASK_ID,
    SEP,
    SEP_ID,
    SubwordVocab,
    TokenSeq,
    wordpiece_tokenize,
)
from .wiki_extract import Aspect, KnowledgePassage

DEFAULT_AUX_TEMPLATE = "What is the {aspect} of {disease}?"


class BuildMode(enum.Enum):
    DEFAULT = "default"
    NO_AUXILIARY = "no_aux"
    NO_ASPECT = "no_aspect"
    NO_DISEASE = "no_disease"
    RANDOM_MLM15 = "mlm15"


@dataclass(frozen=True)
class BuildConfig:
    max_seq_len: int = 256
    mask_rate: float = 0.15
    seed: int = 13
    aux_template: str = DEFAULT_AUX_TEMPLATE
    # per-aspect template overrides, keyed by aspect name
    aux_template_overrides: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValidationError("mask_rate must lie in (0, 1)")
        if self.max_seq_len < 16:
            raise ValidationError("max_seq_len must be at least 16")


@dataclass(frozen=True)
class InfusionExample:
    """One masked training instance with gold labels at mask positions."""

    input_ids: TokenSeq
    mask_positions: tuple[int, ...]
    labels: tuple[int, ...]
    aspect_positions: tuple[int, ...]
    disease_positions: tuple[int, ...]
    mode: BuildMode

    def __post_init__(self):
        if len(self.mask_positions) != len(self.labels):
            raise ValidationError("labels must align with mask_positions")
        if any(
            b <= a for a, b in zip(self.mask_positions, self.mask_positions[1:])
        ):
            raise ValidationError("mask_positions must be strictly increasing")
        if self.mode is not BuildMode.RANDOM_MLM15:
            union = set(self.aspect_positions) | set(self.disease_positions)
            if union != set(self.mask_positions):
                raise ValidationError(
                    "aspect and disease positions must partition mask_positions"
                )
        for pos in self.mask_positions:
            if self.input_ids.ids[pos] != MASK_ID:
                raise ValidationError(f"position {pos} is not masked")


def make_auxiliary_sentence(
    disease: str, aspect: Aspect, template: str | None = None
) -> str:
    """Instantiate the question template with natural-case disease surface."""
    if not disease:
        raise ValidationError("disease surface form is empty")
    template = template or DEFAULT_AUX_TEMPLATE
    return template.format(aspect=aspect.surface_word, disease=disease)


_PLACEHOLDER_RE = re.compile(r"(\{aspect\}|\{disease\})")


def _tokenize_template(
    disease: str, aspect: Aspect, template: str, vocab: SubwordVocab
) -> tuple[list[int], list[str], list[int], list[int]]:
    """Tokenize the auxiliary sentence part by part.

    Returns (ids, surface, aspect_offsets, disease_offsets) where offsets
    index into the auxiliary token list.  Per-part tokenization matches
    whole-string tokenization because the template joins parts at whitespace
    or punctuation boundaries.
    """
    ids: list[int] = []
    surface: list[str] = []
    aspect_offsets: list[int] = []
    disease_offsets: list[int] = []
    for part in _PLACEHOLDER_RE.split(template):
        if part == "{aspect}":
            text, target = aspect.surface_word, aspect_offsets
        elif part == "{disease}":
            text, target = disease, disease_offsets
        else:
            text, target = part, None
        seq = wordpiece_tokenize(text, vocab)
        if target is not None:
            target.extend(range(len(ids), len(ids) + len(seq)))
        ids.extend(seq.ids)
        surface.extend(seq.surface)
    return ids, surface, aspect_offsets, disease_offsets


def _find_subsequence(haystack: list[int], needle: list[int], blocked: set[int]) -> list[int]:
    """First occurrence of needle in haystack avoiding blocked positions."""
    if not needle:
        return []
    for start in range(len(haystack) - len(needle) + 1):
        span = range(start, start + len(needle))
        if any(pos in blocked for pos in span):
            continue
        if haystack[start : start + len(needle)] == list(needle):
            return list(span)
    return []


def build_example(
    passage: KnowledgePassage,
    vocab: SubwordVocab,
    cfg: BuildConfig,
    mode: BuildMode = BuildMode.DEFAULT,
    index: int = 0,
) -> InfusionExample:
    """Turn one passage into a masked training example.

    ``index`` seeds per-example randomness for RANDOM_MLM15 so that parallel
    corpus builds equal serial ones.  Passage tokens are truncated to fit
    ``max_seq_len``; the auxiliary sentence never is.
    """
    text = passage.text.strip()
    if not text:
        raise ValidationError("passage text is empty")
    passage_seq = wordpiece_tokenize(text, vocab)

    if mode in (BuildMode.NO_AUXILIARY, BuildMode.RANDOM_MLM15):
        return _build_without_auxiliary(passage, passage_seq, vocab, cfg, mode, index)

    template = cfg.aux_template_overrides.get(
        passage.aspect.value, cfg.aux_template
    )
    aux_ids, aux_surface, aspect_off, disease_off = _tokenize_template(
        passage.disease, passage.aspect, template, vocab
    )
    budget = cfg.max_seq_len - 2 - len(aux_ids)
    if budget < 0:
        raise ValidationError(
            "auxiliary sentence does not fit within max_seq_len"
        )
    kept = passage_seq.ids[:budget]
    kept_surface = passage_seq.surface[:budget]

    ids = [CLS_ID] + aux_ids + list(kept) + [SEP_ID]
    surface = [CLS] + aux_surface + list(kept_surface) + [SEP]

    aspect_positions = tuple(1 + off for off in aspect_off)
    disease_positions = tuple(1 + off for off in disease_off)
    if mode is BuildMode.NO_ASPECT:
        aspect_positions = ()
    elif mode is BuildMode.NO_DISEASE:
        disease_positions = ()
    mask_positions = tuple(sorted(aspect_positions + disease_positions))
    labels = tuple(ids[pos] for pos in mask_positions)
    for pos in mask_positions:
        ids[pos] = MASK_ID
        surface[pos] = MASK
    return InfusionExample(
        input_ids=TokenSeq(ids=tuple(ids), surface=tuple(surface)),
        mask_positions=mask_positions,
        labels=labels,
        aspect_positions=aspect_positions,
        disease_positions=disease_positions,
        mode=mode,
    )


def _build_without_auxiliary(
    passage: KnowledgePassage,
    passage_seq: TokenSeq,
    vocab: SubwordVocab,
    cfg: BuildConfig,
    mode: BuildMode,
    index: int,
) -> InfusionExample:
    budget = cfg.max_seq_len - 2
    kept = list(passage_seq.ids[:budget])
    surface = [CLS] + list(passage_seq.surface[:budget]) + [SEP]
    ids = [CLS_ID] + kept + [SEP_ID]

    if mode is BuildMode.RANDOM_MLM15:
        rng = np.random.default_rng([cfg.seed, index])
        draws = rng.random(len(kept))
        mask_positions = tuple(
            1 + i for i in range(len(kept)) if draws[i] < cfg.mask_rate
        )
        aspect_positions: tuple[int, ...] = ()
        disease_positions: tuple[int, ...] = ()
    else:
        disease_ids = list(wordpiece_tokenize(passage.disease, vocab).ids)
        aspect_ids = list(
            wordpiece_tokenize(passage.aspect.surface_word, vocab).ids
        )
        disease_span = _find_subsequence(kept, disease_ids, set())
        aspect_span = _find_subsequence(kept, aspect_ids, set(disease_span))
        disease_positions = tuple(1 + p for p in disease_span)
        aspect_positions = tuple(1 + p for p in aspect_span)
        mask_positions = tuple(sorted(disease_positions + aspect_positions))

    labels = tuple(ids[pos] for pos in mask_positions)
    for pos in mask_positions:
        ids[pos] = MASK_ID
        surface[pos] = MASK
    return InfusionExample(
        input_ids=TokenSeq(ids=tuple(ids), surface=tuple(surface)),
        mask_positions=mask_positions,
        labels=labels,
        aspect_positions=aspect_positions,
        disease_positions=disease_positions,
        mode=mode,
    )


def build_corpus(
    passages: list[KnowledgePassage],
    vocab: SubwordVocab,
    cfg: BuildConfig,
    mode: BuildMode = BuildMode.DEFAULT,
) -> list[InfusionExample]:
    return [
        build_example(p, vocab, cfg, mode, index=i)
        for i, p in enumerate(passages)
    ]


def example_to_json(example: InfusionExample) -> dict:
    return {
        "ids": list(example.input_ids.ids),
        "mask_positions": list(example.mask_positions),
        "labels": list(example.labels),
        "aspect_positions": list(example.aspect_positions),
        "disease_positions": list(example.disease_positions),
        "mode": example.mode.value,
    }


_REQUIRED_KEYS = (
    "ids",
    "mask_positions",
    "labels",
    "aspect_positions",
    "disease_positions",
    "mode",
)


def example_from_json(
    obj: dict, vocab: SubwordVocab, line_number: int | None = None
) -> InfusionExample:
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise SchemaError(f"example record missing {key!r}", line_number)
    ids = tuple(int(x) for x in obj["ids"])
    try:
        surface = tuple(vocab.tokens[i] for i in ids)
    except IndexError as exc:
        raise SchemaError("token id out of vocabulary range", line_number) from exc
    try:
        return InfusionExample(
            input_ids=TokenSeq(ids=ids, surface=surface),
            mask_positions=tuple(int(x) for x in obj["mask_positions"]),
            labels=tuple(int(x) for x in obj["labels"]),
            aspect_positions=tuple(int(x) for x in obj["aspect_positions"]),
            disease_positions=tuple(int(x) for x in obj["disease_positions"]),
            mode=BuildMode(obj["mode"]),
        )
    except (ValidationError, ValueError) as exc:
        raise SchemaError(str(exc), line_number) from exc


def write_examples(examples: list[InfusionExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example_to_json(example)) + "\n")


def read_examples(path, vocab: SubwordVocab) -> list[InfusionExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"bad JSON: {exc.msg}", i) from exc
            examples.append(example_from_json(obj, vocab, i))
    return examples
