"""Noise-perturbation captioning experiment and suppression/retention scores.

Noise for cell (level index, sample index, group index) is drawn from
``PCG64(seed)`` with ``seed = base_seed XOR blake2b("li:si:gi")[:8] & (2**63-1)``,
turned into standard normals by Box-Muller, and scaled by the level
(times a reference activation std in ``relative`` mode). The same noise
vector is added to every targeted unit at the given image position and is
held fixed for the whole caption.
"""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .identify import NeuronSet
from .model import GenConfig, Intervention, MultimodalLM, embed_image, generate_batch
from .vocab import knowledge_positions

GAP = "NA"
SCALE_MODES = ("absolute", "relative")


@dataclass(frozen=True)
class NoiseSpec:
    levels: tuple[float, ...] = (2.0, 4.0, 6.0)
    samples: int = 10
    base_seed: int = 0
    scale_mode: str = "relative"

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(x) for x in self.levels))
        if any(x < 0 for x in self.levels):
            raise ValueError("noise levels must be >= 0")
        if self.samples < 1:
            raise ValueError("need at least one noise sample per level")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")

    @classmethod
    def absolute_levels(cls, base_seed: int = 0) -> "NoiseSpec":
        """Absolute levels 40/80/120 with 10 samples each."""
        return cls((40.0, 80.0, 120.0), 10, base_seed, "absolute")


def cell_seed(base_seed: int, level_idx: int, sample_idx: int, group_idx: int) -> int:
    digest = hashlib.blake2b(f"{level_idx}:{sample_idx}:{group_idx}".encode(), digest_size=8)
    return (int(base_seed) ^ int.from_bytes(digest.digest(), "little")) & (2**63 - 1)


def standard_normal(n: int, seed: int) -> np.ndarray:
    """``n`` N(0, 1) draws via Box-Muller on PCG64 uniforms."""
    rng = np.random.Generator(np.random.PCG64(seed))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(2 * math.pi * u2)
    z[1::2] = r * np.sin(2 * math.pi * u2)
    return z[:n]


def sample_noise(level: float, length: int, seed: int) -> np.ndarray:
    if length < 1:
        raise ValueError("noise length must be >= 1")
    if level == 0:
        return np.zeros(length)
    return float(level) * standard_normal(length, seed)


def knowledge_presence(caption_words: Sequence[str], k: str) -> int:
    return int(bool(knowledge_positions(caption_words, k)))


def perturbed_generate(model: MultimodalLM, image: np.ndarray, prompt: Sequence[int],
                       targets: NeuronSet | Iterable, v: np.ndarray,
                       gen: GenConfig = GenConfig()) -> list[int]:
    iv = Intervention(tuple(targets), v)
    return generate_batch(model, np.asarray(image)[None], prompt, gen, [iv])[0]


@dataclass(frozen=True)
class EvalImage:
    image_id: str
    knowledge: str
    pixels: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class PerturbResult:
    k: str
    image_id: str
    image_k: str
    group: int
    method: str
    level: float
    sample: int
    seed: int
    caption: str
    presence: int


RESULT_COLUMNS = ["k", "image_id", "image_k", "group", "method", "level", "sample", "seed",
                  "caption", "presence"]


def run_cells(
    model: MultimodalLM,
    images: Sequence[EvalImage],
    groups: dict[tuple[str, str, int], NeuronSet],
    noise: NoiseSpec,
    prompt: Sequence[int],
    gen: GenConfig = GenConfig(),
    scale: float = 1.0,
    jobs: int = 1,
) -> list[PerturbResult]:
    """Caption every image under every (group, level, sample) noise cell.

    ``groups`` maps (knowledge, method, group index) to the neuron set to
    perturb. Results come back sorted by cell key regardless of ``jobs``.
    """
    P = model.config.n_image_tokens
    unit = scale if noise.scale_mode == "relative" else 1.0
    tokens = embed_image(np.stack([im.pixels for im in images]), model)

    def one_cell(key):
        (k, method, gi), li = key
        targets = tuple(groups[(k, method, gi)])
        level = noise.levels[li]
        ivs, seeds = [], []
        for si in range(noise.samples):
            seed = cell_seed(noise.base_seed, li, si, gi)
            seeds.append(seed)
            ivs.append(Intervention(targets, sample_noise(level * unit, P, seed)))
        n_img = len(images)
        batch_tokens = np.tile(tokens, (noise.samples, 1, 1))
        batch_ivs = [iv for iv in ivs for _ in range(n_img)]
        caps = generate_batch(model, None, prompt, gen, batch_ivs, image_tokens=batch_tokens)
        out = []
        for si in range(noise.samples):
            for j, im in enumerate(images):
                words = [model.vocab.words[t] for t in caps[si * n_img + j]]
                out.append(PerturbResult(k, im.image_id, im.knowledge, gi, method, level, si,
                                         seeds[si], " ".join(words),
                                         knowledge_presence(words, im.knowledge)))
        return out

    keys = sorted((g, li) for g in groups for li in range(len(noise.levels)))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(one_cell, keys))
    else:
        chunks = [one_cell(key) for key in keys]
    return [r for chunk in chunks for r in chunk]


@dataclass
class ScoreRow:
    k: str
    level: float | str
    method: str
    S_se: float | None
    S_re: float | None
    S_mean: float | None


SCORE_COLUMNS = ["k", "level", "method", "S_se", "S_re", "S_mean"]


def _mean(xs: list[int]) -> float | None:
    return float(np.mean(xs)) if xs else None


def suppression_scores(results: Iterable[PerturbResult]) -> list[ScoreRow]:
    """Per (k, level, method) scores plus one "Ave." row per method.

    S_k averages presence over images of k, S_kbar over images of other
    knowledge; S_se = 1 - S_k, S_re = S_kbar, S_mean = (S_se + S_re) / 2.
    A cell without data carries ``None`` (written as NA).
    """
    target: dict[tuple, list[int]] = {}
    other: dict[tuple, list[int]] = {}
    for r in results:
        key = (r.k, r.level, r.method)
        (target if r.image_k == r.k else other).setdefault(key, []).append(r.presence)
        (other if r.image_k == r.k else target).setdefault(key, [])
    rows = []
    for key in sorted(set(target) | set(other)):
        s_k, s_kbar = _mean(target.get(key, [])), _mean(other.get(key, []))
        se = None if s_k is None else 1.0 - s_k
        sm = None if se is None or s_kbar is None else (se + s_kbar) / 2
        rows.append(ScoreRow(key[0], key[1], key[2], se, s_kbar, sm))
    for method in sorted({r.method for r in rows}):
        mine = [r for r in rows if r.method == method]
        ave = {}
        for col in ("S_se", "S_re", "S_mean"):
            vals = [getattr(r, col) for r in mine]
            ave[col] = None if any(v is None for v in vals) else float(np.mean(vals))
        rows.append(ScoreRow("Ave.", "-", method, ave["S_se"], ave["S_re"], ave["S_mean"]))
    return rows


def average_rows(rows: Sequence[ScoreRow]) -> dict[str, ScoreRow]:
    return {r.method: r for r in rows if r.k == "Ave."}


def _fmt(v) -> str:
    if v is None:
        return GAP
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(path, results: Sequence[PerturbResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])


def read_results_csv(path) -> list[PerturbResult]:
    out = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            out.append(PerturbResult(d["k"], d["image_id"], d["image_k"], int(d["group"]),
                                     d["method"], float(d["level"]), int(d["sample"]),
                                     int(d["seed"]), d["caption"], int(d["presence"])))
    return out


def write_scores_csv(path, rows: Sequence[ScoreRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in SCORE_COLUMNS])
