"""Seeded synthetic scene corpora for training and knowledge sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .imaging import Scene, random_scene, render_scene
from .vocab import DEFAULT_VOCAB, EOS, SYNTHETIC_OBJECTS, Vocab, scene_caption

DEFAULT_KNOWLEDGE = tuple(SYNTHETIC_OBJECTS)


@dataclass(frozen=True)
class SceneItem:
    scene: Scene
    seed: int

    def render(self) -> np.ndarray:
        return render_scene(self.scene, self.seed)

    def caption(self) -> str:
        return scene_caption(self.scene.labels_left_to_right(), self.scene.background)


def caption_ids(text: str, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
    return vocab.encode(f"{text} {EOS}")


COUNT_WEIGHTS = (0.25, 0.4, 0.35)  # P(1 object), P(2), P(3)


def random_scenes(n: int, seed: int, labels: Sequence[str] = DEFAULT_KNOWLEDGE,
                  count_weights: Sequence[float] = COUNT_WEIGHTS) -> list[SceneItem]:
    """``n`` scenes with one to three distinct objects drawn from ``labels``."""
    rng = np.random.default_rng(seed)
    labels = list(labels)
    w = np.asarray(count_weights[: len(labels)], dtype=float)
    items = []
    for _ in range(n):
        k = 1 + int(rng.choice(len(w), p=w / w.sum()))
        picked = [labels[i] for i in rng.choice(len(labels), size=k, replace=False)]
        items.append(SceneItem(random_scene(rng, picked), int(rng.integers(0, 2**31 - 1))))
    return items


def training_examples(items: Sequence[SceneItem], vocab: Vocab = DEFAULT_VOCAB):
    return [(it.render(), caption_ids(it.caption(), vocab)) for it in items]


def knowledge_scenes(knowledge: Sequence[str], per_knowledge: int, seed: int,
                     labels: Sequence[str] = DEFAULT_KNOWLEDGE) -> dict[str, list[SceneItem]]:
    """Scenes per knowledge token: the target plus one or two other objects."""
    rng = np.random.default_rng(seed)
    out: dict[str, list[SceneItem]] = {}
    for k in knowledge:
        others = [x for x in labels if x != k]
        items = []
        for _ in range(per_knowledge):
            n_other = min(1 + int(rng.integers(0, 2)), len(others))
            picked = [k] + [others[i] for i in rng.choice(len(others), size=n_other, replace=False)]
            items.append(SceneItem(random_scene(rng, picked), int(rng.integers(0, 2**31 - 1))))
        out[k] = items
    return out
