"""Knowledge-neuron identification.

Stage one keeps FFN units whose image-token activation drops by more than
``threshold_a`` at some patch when the object is inpainted away (candidate
set C). Stage two keeps members of C whose GradCAM value
``O' * d y_c / d O'`` exceeds ``threshold_g`` at some patch (final set N).

Two comparison scorers are included. They are reconstructions, not the
original authors' code:

* gradient scoring: GradCAM values averaged over image patches;
* activation x weight scoring: mean image-patch activation times the value
  vector's unembedded weight on the target token.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .model import (
    MultimodalLM,
    embed_image,
    forward_with_capture,
    target_logit,
)
from .vocab import knowledge_positions


class PreconditionError(ValueError):
    pass


class NeuronId(NamedTuple):
    layer: int
    unit: int


@dataclass
class ImageActivations:
    """Activations O' (L, P, d_f) at image-token positions."""

    values: np.ndarray
    image_id: str = ""
    prompt: tuple[int, ...] = ()


@dataclass
class ActivationDiff:
    values: np.ndarray
    knowledge: str = ""


@dataclass(frozen=True)
class Thresholds:
    act: float
    grad: float

    def __post_init__(self):
        if not (np.isfinite(self.act) and np.isfinite(self.grad)):
            raise ValueError("thresholds must be finite")
        if self.grad < 0:
            raise ValueError("GradCAM threshold must be >= 0")


STAGES = ("candidate", "final", "baseline")


@dataclass
class NeuronSet:
    members: list[NeuronId]
    stage: str
    evidence: dict[NeuronId, float] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        self.members = [NeuronId(int(l), int(i)) for l, i in self.members]
        if len(set(self.members)) != len(self.members):
            raise ValueError("duplicate neurons in set")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, n) -> bool:
        return NeuronId(*n) in set(self.members)

    def to_json(self) -> list[dict]:
        return [
            {"layer": n.layer, "unit": n.unit, "evidence": float(self.evidence.get(n, 0.0))}
            for n in self.members
        ]

    def save(self, path) -> None:
        doc = {"label": self.label, "stage": self.stage, "neurons": self.to_json()}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "NeuronSet":
        doc = json.loads(Path(path).read_text())
        members = [NeuronId(d["layer"], d["unit"]) for d in doc["neurons"]]
        ev = {NeuronId(d["layer"], d["unit"]): d["evidence"] for d in doc["neurons"]}
        return cls(members, doc["stage"], ev, doc.get("label", ""))


def image_activations(model: MultimodalLM, image: np.ndarray, prompt: Sequence[int],
                      image_id: str = "") -> ImageActivations:
    P = model.config.n_image_tokens
    _, rec = forward_with_capture(model, embed_image(image, model), prompt)
    return ImageActivations(rec.O[:, :P, :].copy(), image_id, tuple(prompt))


def activation_diff(orig: ImageActivations, inp: ImageActivations, knowledge: str = "",
                    absolute: bool = False) -> ActivationDiff:
    """Signed ``orig - inp`` (or its magnitude with ``absolute=True``)."""
    if orig.values.shape != inp.values.shape:
        raise ValueError(f"activation shapes differ: {orig.values.shape} vs {inp.values.shape}")
    if orig.prompt != inp.prompt:
        raise ValueError("activations were captured with different prompts")
    d = orig.values - inp.values
    return ActivationDiff(np.abs(d) if absolute else d, knowledge)


def _from_mask(keep: np.ndarray, evidence: np.ndarray, stage: str, label: str) -> NeuronSet:
    layers, units = np.nonzero(keep)
    members = [NeuronId(int(l), int(i)) for l, i in zip(layers, units)]
    ev = {n: float(evidence[n.layer, n.unit]) for n in members}
    return NeuronSet(members, stage, ev, label)


def candidate_set(diff: ActivationDiff | np.ndarray, threshold_a: float) -> NeuronSet:
    """Units with ``V[l, p, i] > threshold_a`` for at least one patch p."""
    if not np.isfinite(threshold_a):
        raise ValueError("threshold_a must be finite")
    V = diff.values if isinstance(diff, ActivationDiff) else np.asarray(diff)
    label = diff.knowledge if isinstance(diff, ActivationDiff) else ""
    peak = V.max(axis=1)
    return _from_mask(peak > threshold_a, peak, "candidate", label)


def caption_prefix(prompt: Sequence[int], caption: Sequence[int], knowledge: str,
                   model: MultimodalLM) -> tuple[list[int], int]:
    """Prompt plus caption up to the first occurrence of ``knowledge``, and its token id."""
    words = [model.vocab.words[t] for t in caption]
    hits = knowledge_positions(words, knowledge)
    if not hits:
        raise PreconditionError(f"{knowledge!r} does not occur in the generated caption")
    pos = hits[0]
    return list(prompt) + list(caption[:pos]), int(caption[pos])


def gradcam(model: MultimodalLM, image: np.ndarray, prefix: Sequence[int], c: int) -> np.ndarray:
    """``O' * d y_c / d O'`` at image positions, shape (L, P, d_f)."""
    traced = target_logit(model, image, prefix, c)
    P = model.config.n_image_tokens
    grads = traced.activation_grads()[:, :P, :]
    return traced.record.O[:, :P, :] * grads


def final_set(cands: NeuronSet, g_c: np.ndarray, threshold_g: float,
              same_patch_mask: np.ndarray | None = None) -> NeuronSet:
    """Members of ``cands`` with ``g_c[l, p, i] > threshold_g`` at some patch.

    ``same_patch_mask`` (L, P, d_f booleans, typically ``V > threshold_a``)
    restricts the patch quantifier to the patches that admitted the unit.
    """
    g = np.asarray(g_c)
    hit = g > threshold_g
    if same_patch_mask is not None:
        hit = hit & same_patch_mask
    members, ev = [], {}
    for n in cands.members:
        if hit[n.layer, :, n.unit].any():
            members.append(n)
            ev[n] = float(g[n.layer, :, n.unit].max())
    return NeuronSet(members, "final", ev, cands.label)


def gradient_scores(g_c: np.ndarray) -> np.ndarray:
    return np.asarray(g_c).mean(axis=1)


def score_gradient_baseline(model: MultimodalLM, image, prefix, c) -> np.ndarray:
    """Per-unit score (L, d_f): GradCAM averaged over image patches."""
    return gradient_scores(gradcam(model, image, prefix, c))


def value_logit_weights(model: MultimodalLM, c: int) -> np.ndarray:
    """(L, d_f): entry (l, i) is (U @ W_out^l[:, i])[c]."""
    u_c = model.params["unembed_w"][:, c]
    return np.stack([model.params[f"l{l}.ffn_out_w"] @ u_c for l in range(model.config.n_layers)])


def actweight_scores(acts: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.asarray(acts).mean(axis=1) * weights


def score_actweight_baseline(model: MultimodalLM, image, prompt, c: int) -> np.ndarray:
    acts = image_activations(model, image, prompt).values
    return actweight_scores(acts, value_logit_weights(model, c))


def top_k(scores: np.ndarray, count: int, label: str = "") -> NeuronSet:
    """The ``count`` highest-scoring units, ties broken by ascending (layer, unit)."""
    scores = np.asarray(scores, dtype=np.float64)
    L, F = scores.shape
    if count < 0 or count > L * F:
        raise ValueError(f"count {count} outside [0, {L * F}]")
    flat = scores.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))[:count]
    members = [NeuronId(int(k // F), int(k % F)) for k in order]
    return NeuronSet(members, "baseline", {n: float(scores[n]) for n in members}, label)


def random_set(n_layers: int, d_ff: int, count: int, rng: np.random.Generator,
               label: str = "") -> NeuronSet:
    picks = rng.choice(n_layers * d_ff, size=count, replace=False)
    members = [NeuronId(int(k // d_ff), int(k % d_ff)) for k in picks]
    return NeuronSet(members, "baseline", {}, label)


def decode_neuron(model: MultimodalLM, neuron, top_n: int = 5) -> list[tuple[str, float]]:
    """Top tokens of ``U @ W_out^l[:, i]``, descending, ties by token id."""
    l, i = neuron
    vals = model.unembedding() @ model.ffn_out(l)[:, i]
    order = np.lexsort((np.arange(vals.size), -vals))[: min(top_n, vals.size)]
    return [(model.vocab.words[t], float(vals[t])) for t in order]


def layer_histogram(sets: Iterable[NeuronSet], n_layers: int) -> np.ndarray:
    counts = np.zeros(n_layers, dtype=np.int64)
    for s in sets:
        for n in s.members:
            counts[n.layer] += 1
    return counts


def write_histogram_csv(path, counts: np.ndarray, column: str = "count") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", column])
        for l, c in enumerate(counts):
            w.writerow([l, int(c)])


def calibrate_thresholds(diff: np.ndarray, g_c: np.ndarray, act_pct: float = 99.9,
                         grad_pct: float = 50.0) -> Thresholds:
    """Percentile thresholds: ``act_pct`` of all V entries; ``grad_pct`` of the
    positive GradCAM entries among units that pass the activation threshold."""
    thr_a = float(np.percentile(diff, act_pct))
    peak = np.asarray(diff).max(axis=1)
    cand = peak > thr_a
    pool = np.transpose(g_c, (0, 2, 1))[cand].reshape(-1)
    pool = pool[pool > 0]
    thr_g = float(np.percentile(pool, grad_pct)) if pool.size else 0.0
    return Thresholds(thr_a, max(thr_g, 0.0))


def heatmap_values(acts: np.ndarray, diff: np.ndarray, final: NeuronSet, top: int = 5) -> np.ndarray:
    """Mean patch activation (P,) of the ``top`` members of ``final`` with the
    largest activation difference."""
    peak = np.asarray(diff).max(axis=1)
    ranked = sorted(final.members, key=lambda n: (-peak[n.layer, n.unit], n))[:top]
    if not ranked:
        return np.zeros(acts.shape[1])
    return np.mean([acts[n.layer, :, n.unit] for n in ranked], axis=0)
