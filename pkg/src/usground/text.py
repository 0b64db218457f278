"""Prompt tokenization against a small fixed vocabulary.

Lowercase, split on anything that is not a letter or digit, look each word up
in the vocabulary, and fall back to a reserved UNK id for anything unknown.
PAD is reserved for batching ragged prompts and is never produced by
tokenize().
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import PromptError

PAD_ID = 0
UNK_ID = 1
_RESERVED = ("<pad>", "<unk>")

# ~32 words of appearance/anatomy vocabulary the synthetic prompts and the
# sweep variations draw from.
DEFAULT_WORDS = (
    "bright", "dark", "lesion", "mass", "tumor", "cyst", "nodule", "spot",
    "blob", "region", "area", "benign", "malignant", "hyperechoic",
    "hypoechoic", "echogenic", "anechoic", "solid", "fluid", "round", "oval",
    "irregular", "small", "large", "left", "right", "upper", "lower",
    "capsule", "cortex", "muscle", "thyroid",
)

_WORD_RE = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Fixed word list with PAD/UNK reserved at the front of the id space."""

    def __init__(self, words=DEFAULT_WORDS):
        deduped = tuple(dict.fromkeys(w.lower() for w in words))
        self.words = deduped
        self._ids = {w: i + len(_RESERVED) for i, w in enumerate(deduped)}

    def __len__(self):
        return len(self.words) + len(_RESERVED)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def __contains__(self, word):
        return word in self._ids


@dataclass(frozen=True)
class PromptTokens:
    ids: tuple
    text: str
    vocab: Vocabulary

    def __len__(self):
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary) -> PromptTokens:
    """Lowercase + punctuation-insensitive lookup; raises PromptError on
    blank input (a prompt must carry at least one token)."""
    if not isinstance(text, str) or not text.strip():
        raise PromptError("prompt must be nonempty text")
    words = _WORD_RE.findall(text.lower())
    if not words:
        raise PromptError(f"prompt {text!r} contains no tokenizable words")
    ids = tuple(vocab.id_of(w) for w in words)
    return PromptTokens(ids=ids, text=text, vocab=vocab)
