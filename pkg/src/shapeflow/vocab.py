"""Toy prompt vocabulary shared by the corpus generator and the encoders.

The grammar is tiny and closed: color and shape words, the motion verb,
compass direction words, the conjunction, and one image placeholder
token. Vocabularies round-trip through a line-oriented file (the word on
line ``i`` has id ``i``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

COLOR_WORDS = ("red", "green", "blue", "yellow", "magenta", "cyan", "white", "black")
SHAPE_WORDS = ("circle", "square", "triangle")
DIRECTION_WORDS = (
    "right",
    "left",
    "up",
    "down",
    "upright",
    "upleft",
    "downright",
    "downleft",
    "nowhere",
)
VERB_WORD = "moves"
AND_WORD = "and"
IMAGE_PLACEHOLDER = "<img>"


class VocabError(KeyError):
    """Raised for words or token ids outside the vocabulary."""


@dataclass(frozen=True)
class Vocab:
    words: tuple
    index: dict = field(repr=False)

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise VocabError(f"unknown word {word!r}") from None

    def word_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.words):
            raise VocabError(f"token id {token_id} outside vocabulary of size {len(self.words)}")
        return self.words[token_id]

    def encode(self, text: str) -> list:
        return [self.id_of(w) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.word_of(int(i)) for i in ids)


def build_vocab() -> Vocab:
    words = (
        COLOR_WORDS
        + SHAPE_WORDS
        + (VERB_WORD, AND_WORD)
        + DIRECTION_WORDS
        + (IMAGE_PLACEHOLDER,)
    )
    return Vocab(words=words, index={w: i for i, w in enumerate(words)})


def save_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word in vocab.words:
            fh.write(word + "\n")


def load_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        words = tuple(line.rstrip("\n") for line in fh if line.strip())
    return Vocab(words=words, index={w: i for i, w in enumerate(words)})
