"""Whitespace tokenizer for the desk-scale text encoder.

Real deployments swap in a BPE tokenizer from the pretrained backend; this one
keeps the same sequence contract (BOS/EOS framing, PAD to a fixed length) over
a small fixed vocabulary so that everything downstream is deterministic and
fast enough for CI.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

MAX_TOKENS = 77

PAD_TOKEN = "[pad]"
BOS_TOKEN = "[bos]"
EOS_TOKEN = "[eos]"
UNK_TOKEN = "[unk]"
MASK_TOKEN = "[mask]"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, MASK_TOKEN)

# Curated person-description vocabulary; the remainder of the table is filled
# with numbered placeholder tokens up to the configured vocabulary size.
WORD_BANK = [
    "a", "an", "the", "photo", "of", "is", "and", "with", "in", "on",
    "person", "man", "woman", "girl", "boy", "wearing", "carrying", "holding",
    "dressed", "walking", "standing", "sitting",
    "red", "blue", "green", "yellow", "black", "white", "gray", "brown",
    "orange", "purple", "pink", "crimson", "navy", "olive", "teal", "beige",
    "maroon", "violet", "indigo", "golden", "silver", "dark", "light",
    "shirt", "sweater", "jacket", "coat", "dress", "skirt", "jeans",
    "trousers", "pants", "shorts", "hoodie", "blouse", "vest", "suit",
    "uniform", "scarf", "hat", "cap", "boots", "shoes", "sneakers",
    "sandals", "heels", "backpack", "handbag", "umbrella", "suitcase",
    "newspaper", "phone", "bottle", "glasses", "sunglasses", "watch",
    "striped", "plaid", "floral", "plain", "short", "long", "sleeved",
    "hair", "ponytail", "beard", "tall", "young", "old", "now", "instead",
    "different", "same", "new", "bag", "top", "bottom",
]

_WORD_SPLIT = re.compile(r"\s+")
_STRIP_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length token id sequence: BOS ... EOS padded with PAD."""

    token_ids: tuple[int, ...]
    valid_length: int

    def __post_init__(self):
        if len(self.token_ids) != MAX_TOKENS:
            raise ValueError(f"token sequence must have length {MAX_TOKENS}")


def normalize_words(text: str) -> list[str]:
    words = []
    for raw in _WORD_SPLIT.split(text.strip().lower()):
        w = _STRIP_PUNCT.sub("", raw)
        if w:
            words.append(w)
    return words


class WhitespaceTokenizer:
    """Lowercasing whitespace tokenizer over a fixed vocabulary.

    Unknown words map to UNK. Sequences are BOS-framed, EOS-terminated and
    padded to ``max_len``; overlong inputs are truncated so that EOS stays the
    final non-PAD token.
    """

    def __init__(self, vocab_size: int = 1000, extra_words: list[str] | None = None,
                 max_len: int = MAX_TOKENS):
        words = list(SPECIAL_TOKENS) + list(WORD_BANK)
        for w in extra_words or []:
            if w not in words:
                words.append(w)
        if len(words) > vocab_size:
            raise ValueError(
                f"vocab_size={vocab_size} too small for {len(words)} base words")
        fill = 0
        while len(words) < vocab_size:
            cand = f"w{fill:04d}"
            if cand not in words:
                words.append(cand)
            fill += 1
        self.max_len = max_len
        self.words: tuple[str, ...] = tuple(words)
        self.ids: dict[str, int] = {w: i for i, w in enumerate(words)}
        self.pad_id = self.ids[PAD_TOKEN]
        self.bos_id = self.ids[BOS_TOKEN]
        self.eos_id = self.ids[EOS_TOKEN]
        self.unk_id = self.ids[UNK_TOKEN]
        self.mask_id = self.ids[MASK_TOKEN]

    def __len__(self) -> int:
        return len(self.words)

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    def word_ids(self, text: str) -> list[int]:
        """Vocabulary ids for the words of ``text``, without framing."""
        return [self.ids.get(w, self.unk_id) for w in normalize_words(text)]

    def tokenize(self, text: str) -> TokenSequence:
        body = self.word_ids(text)[: self.max_len - 2]
        ids = [self.bos_id] + body + [self.eos_id]
        valid = len(ids)
        ids.extend([self.pad_id] * (self.max_len - valid))
        return TokenSequence(tuple(ids), valid)

    def decode_id(self, token_id: int) -> str:
        return self.words[token_id]

    def decode(self, seq: TokenSequence) -> str:
        """Canonical string form: body words, specials dropped."""
        body = [
            self.words[t] for t in seq.token_ids[: seq.valid_length]
            if t not in (self.pad_id, self.bos_id, self.eos_id)
        ]
        return " ".join(body)
