"""Closed word-level vocabulary, tokenizer and caption templates."""

from __future__ import annotations

from typing import Iterable, Sequence

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"

PROMPT = "the image shows a"

# synthetic scene objects: category -> shape kind, object -> color
SHAPE_OF_CATEGORY = {"animal": "circle", "food": "triangle", "vehicle": "square"}
SYNTHETIC_OBJECTS = {
    "bear": ("animal", "brown"),
    "horse": ("animal", "orange"),
    "giraffe": ("animal", "yellow"),
    "banana": ("food", "red"),
    "pizza": ("food", "green"),
    "cake": ("food", "pink"),
    "bus": ("vehicle", "blue"),
    "airplane": ("vehicle", "cyan"),
    "bicycle": ("vehicle", "purple"),
}
BACKGROUNDS = {"sand": (194, 178, 128), "snow": (232, 232, 236), "road": (72, 72, 76)}
# one color per object so that a 32x32 render is unambiguous at patch resolution
COLORS = {
    "brown": (120, 60, 20),
    "orange": (250, 130, 0),
    "yellow": (240, 220, 0),
    "red": (214, 38, 40),
    "green": (36, 170, 64),
    "pink": (250, 110, 200),
    "blue": (44, 76, 212),
    "cyan": (0, 210, 220),
    "purple": (130, 30, 160),
}

_GRAMMAR = [
    "the", "image", "shows", "a", "an", "and", "of", "on", "in", "with", "near",
    "left", "right", "top", "bottom", "front", "behind", "next", "to", "is", "are",
    "there", "some", "two", "three", "empty", "room", "field", "street", "table", "water",
    "grass", "sky", "wall", "floor", "window", "ocean", "chair", "man", "woman",
    "person", "people", "dog", "cat", "bird", "car", "truck", "boat", "train",
]
_COLORS_EXTRA = ["white", "black", "brown", "yellow", "orange", "gray", "pink"]
# COCO category words (multi-word labels split on spaces)
_COCO = [
    "bed", "refrigerator", "toilet", "tennis", "racket", "fire", "hydrant", "stop",
    "sign", "microwave", "toaster", "surfboard", "snowboard", "traffic", "light",
    "keyboard", "cell", "phone", "scissors", "book", "clock", "suitcase", "backpack",
    "umbrella", "laptop", "vase", "elephant", "zebra", "sheep", "cow", "motorcycle",
    "couch", "bench", "kite", "oven", "sink", "apple", "orange", "sandwich", "donut",
    "bottle", "cup", "fork", "knife", "spoon", "bowl", "mouse", "remote",
]


def _build_words() -> list[str]:
    words = [PAD, UNK, EOS]
    for w in (
        _GRAMMAR
        + list(SYNTHETIC_OBJECTS)
        + list(BACKGROUNDS)
        + list(COLORS)
        + list(SHAPE_OF_CATEGORY.values())
        + _COLORS_EXTRA
        + _COCO
    ):
        if w not in words:
            words.append(w)
    return words


class Vocab:
    """Whitespace tokenizer over a fixed word list; unknown words map to UNK."""

    def __init__(self, words: Sequence[str] | None = None):
        self.words = list(words) if words is not None else _build_words()
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate vocabulary entries")
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.eos_id = self.index[EOS]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.index

    def id(self, word: str) -> int:
        return self.index.get(word.lower(), self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def decode(self, ids: Iterable[int], stop_at_eos: bool = True) -> str:
        out = []
        for i in ids:
            if stop_at_eos and i == self.eos_id:
                break
            out.append(self.words[i])
        return " ".join(out)


def scene_caption(labels: Sequence[str], background: str) -> str:
    """Caption for a scene; ``labels`` must be ordered left to right."""
    if not labels:
        return f"{PROMPT} empty {background}"
    body = " and a ".join(labels)
    return f"{PROMPT} {body} on {background}"


DEFAULT_VOCAB = Vocab()


def _norm(word: str) -> str:
    w = word.lower()
    if len(w) > 3 and w.endswith("s") and not w.endswith("ss"):
        w = w[:-1]
    return w


def knowledge_positions(words: Sequence[str], knowledge: str) -> list[int]:
    """Start indices where ``knowledge`` (possibly multi-word) occurs in ``words``.

    Matching is case-insensitive and treats a trailing plural 's' as absent.
    """
    target = [_norm(w) for w in knowledge.split()]
    seq = [_norm(w) for w in words]
    n = len(target)
    if n == 0:
        return []
    return [i for i in range(len(seq) - n + 1) if seq[i:i + n] == target]
