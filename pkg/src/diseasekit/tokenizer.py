"""WordPiece sub-word tokenization and a small frequency-based vocab builder.

Continuation pieces carry the "##" prefix.  The builder guarantees that every
character seen in its corpus is available both as a word-initial piece and as
a continuation piece, so text drawn from the corpus never tokenizes to [UNK].
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import CapacityError, ValidationError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)


@dataclass(frozen=True)
class SubwordVocab:
    """Immutable token list plus its inverse index; ids are line numbers."""

    tokens: tuple[str, ...]
    index: dict[str, int]

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "SubwordVocab":
        tokens = tuple(tokens)
        if tokens[:5] != SPECIAL_TOKENS:
            raise ValidationError(
                "vocabulary must start with [PAD],[UNK],[CLS],[SEP],[MASK]"
            )
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        return cls(tokens=tokens, index=index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)


@dataclass(frozen=True)
class TokenSeq:
    """Parallel lists of token ids and their surface strings."""

    ids: tuple[int, ...]
    surface: tuple[str, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.surface):
            raise ValidationError("ids and surface lengths differ")

    def __len__(self) -> int:
        return len(self.ids)


def basic_words(text: str) -> list[str]:
    """Lowercase and split into words; punctuation becomes its own word."""
    words: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if ch.isspace():
            if current:
                words.append("".join(current))
                current = []
        elif ch.isalnum():
            current.append(ch)
        else:
            if current:
                words.append("".join(current))
                current = []
            words.append(ch)
    if current:
        words.append("".join(current))
    return words


def segment_word(word: str, vocab: SubwordVocab) -> list[str] | None:
    """Greedy longest-match-first segmentation; None when impossible."""
    pieces: list[str] = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return None
        pieces.append(match)
        start = end
    return pieces


def wordpiece_tokenize(text: str, vocab: SubwordVocab) -> TokenSeq:
    """Tokenize text into sub-word pieces; unsegmentable words become [UNK]."""
    surface: list[str] = []
    for word in basic_words(text):
        pieces = segment_word(word, vocab)
        surface.extend(pieces if pieces is not None else [UNK])
    ids = tuple(vocab.index[tok] for tok in surface)
    return TokenSeq(ids=ids, surface=tuple(surface))


def build_vocab(
    corpus: Iterable[str],
    target_size: int = 2000,
    min_freq: int = 1,
    extra_pieces: Iterable[str] = (),
) -> SubwordVocab:
    """Build a vocabulary from raw text lines.

    Layout: the five specials at ids 0..4, then pieces in descending
    frequency (ties broken lexicographically) until ``target_size``.
    Candidate pieces are whole words, single characters (as word-initial and
    "##" continuation pieces), and "##" continuation bigrams.  All seen
    characters are always included regardless of ``min_freq``; forced
    ``extra_pieces`` likewise.
    """
    if target_size <= 5:
        raise ValidationError("target_size must exceed the special-token count")
    word_freq: Counter[str] = Counter()
    for line in corpus:
        word_freq.update(basic_words(line))

    piece_freq: Counter[str] = Counter()
    chars: set[str] = set()
    for word, freq in word_freq.items():
        piece_freq[word] += freq
        for pos, ch in enumerate(word):
            chars.add(ch)
            piece_freq[ch if pos == 0 else "##" + ch] += freq
        for pos in range(1, len(word) - 1):
            piece_freq["##" + word[pos : pos + 2]] += freq

    mandatory: set[str] = set()
    for ch in chars:
        mandatory.add(ch)
        mandatory.add("##" + ch)
    mandatory.update(extra_pieces)
    if len(mandatory) + 5 > target_size:
        raise CapacityError(
            f"target_size {target_size} cannot hold {len(mandatory)} "
            "mandatory pieces plus specials"
        )

    def rank(piece: str) -> tuple[int, str]:
        return (-piece_freq[piece], piece)

    optional = sorted(
        (
            piece
            for piece, freq in piece_freq.items()
            if piece not in mandatory and freq >= min_freq
        ),
        key=rank,
    )
    budget = target_size - 5 - len(mandatory)
    selected = set(mandatory) | set(optional[:budget])
    return SubwordVocab.from_tokens(
        list(SPECIAL_TOKENS) + sorted(selected, key=rank)
    )


def decode(ids: Iterable[int], vocab: SubwordVocab) -> str:
    """Render ids to text: "##" pieces fuse onto the previous token."""
    parts: list[str] = []
    for token_id in ids:
        if not 0 <= token_id < len(vocab):
            raise ValidationError(f"token id {token_id} out of range")
        token = vocab.tokens[token_id]
        if token.startswith("##") and parts:
            parts[-1] += token[2:]
        else:
            parts.append(token)
    return " ".join(parts)


def save_vocab(vocab: SubwordVocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in vocab.tokens:
            fh.write(token + "\n")


def load_vocab(path) -> SubwordVocab:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    while tokens and tokens[-1] == "":
        tokens.pop()
    return SubwordVocab.from_tokens(tokens)


def iter_text_lines(paths: Iterable[str]) -> Iterator[str]:
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            yield from fh
