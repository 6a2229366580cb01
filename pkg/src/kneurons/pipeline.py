"""End-to-end orchestration: corpus, validation, identification, perturbation, reports.

A run is described by a single JSON document; relative paths resolve
against the config file's directory. Every artifact written under the run
directory is listed with its sha256 in ``manifest.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, _kernels
from .corpus import DEFAULT_KNOWLEDGE, SceneItem, knowledge_scenes, random_scenes, training_examples
from .identify import (
    NeuronSet,
    Thresholds,
    activation_diff,
    actweight_scores,
    calibrate_thresholds,
    candidate_set,
    caption_prefix,
    decode_neuron,
    final_set,
    gradcam,
    gradient_scores,
    heatmap_values,
    image_activations,
    layer_histogram,
    random_set,
    top_k,
    value_logit_weights,
    write_histogram_csv,
)
from .imaging import (
    BACKGROUNDS,
    bbox_mask,
    bboxes_overlap,
    heatmap_overlay,
    inpaint,
    save_corpus_spec,
    write_ppm,
)
from .metrics import MetricReport, compare, mean_report
from .model import FitParams, GenConfig, MultimodalLM, fit, generate_batch
from .perturb import (
    EvalImage,
    NoiseSpec,
    PerturbResult,
    average_rows,
    knowledge_presence,
    run_cells,
    suppression_scores,
    write_results_csv,
    write_scores_csv,
)
from .vocab import PROMPT

log = logging.getLogger(__name__)

METHODS = ("ours", "gradient_baseline", "actweight_baseline", "random_baseline")
REASONS = ("ORIGINAL_MISSING_K", "INPAINT_CONTAINS_K", "MASK_OVERLAPS_OTHER")
BUNDLED_MODEL = "bundled"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("kneurons") / "data" / name))


def load_reference_model() -> MultimodalLM:
    return MultimodalLM.load(bundled_path("reference_model.npz"))


# ---------------------------------------------------------------------------
# reference training recipe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRecipe:
    n_scenes: int = 3000
    scene_seed: int = 1
    init_seed: int = 0
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-3

    def fit_params(self) -> FitParams:
        return FitParams(steps=self.steps, lr=self.lr, batch_size=self.batch_size,
                         seed=self.init_seed)


def train_reference(recipe: TrainRecipe = TrainRecipe(), log_every: int = 100):
    examples = training_examples(random_scenes(recipe.n_scenes, recipe.scene_seed))
    init = MultimodalLM.init(seed=recipe.init_seed)
    return fit(init, examples, recipe.fit_params(), log_every=log_every, logger=log)


def caption_accuracy(model: MultimodalLM, n: int = 100, seed: int = 12345,
                     gen: GenConfig = GenConfig()) -> float:
    """Fraction of held-out scenes whose caption names every object in them."""
    items = random_scenes(n, seed)
    caps = generate_batch(model, np.stack([it.render() for it in items]),
                          model.prompt_ids(), gen)
    ok = 0
    for it, cap in zip(items, caps):
        words = [model.vocab.words[t] for t in cap]
        ok += all(knowledge_presence(words, lab) for lab in it.scene.labels_left_to_right())
    return ok / n


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    base_dir: Path = field(default_factory=Path.cwd)
    checkpoint: str | None = BUNDLED_MODEL
    train: TrainRecipe | None = None
    knowledge: tuple[str, ...] = DEFAULT_KNOWLEDGE
    per_knowledge: int = 3
    candidates_per_knowledge: int = 8
    corpus_seed: int = 7
    thresholds: dict[str, Thresholds] = field(default_factory=dict)
    act_pct: float = 99.0
    grad_pct: float = 50.0
    same_patch: bool = False
    absolute_diff: bool = False
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    methods: tuple[str, ...] = METHODS
    out: Path = Path("run")
    seed: int = 0
    jobs: int = 1
    prompt: str = PROMPT
    max_new_tokens: int = 12
    heatmaps: bool = True
    metrics: bool = True

    def validate(self) -> None:
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        if self.per_knowledge < 1 or self.candidates_per_knowledge < self.per_knowledge:
            raise ConfigError("candidates_per_knowledge must be >= per_knowledge >= 1")
        if not self.knowledge:
            raise ConfigError("knowledge list is empty")
        if self.checkpoint is None and self.train is None:
            raise ConfigError("config needs a model checkpoint or a training recipe")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    def gen(self, model: MultimodalLM) -> GenConfig:
        return GenConfig(max_new_tokens=self.max_new_tokens, eos_id=model.vocab.eos_id)

    def to_json(self) -> dict:
        d = {
            "checkpoint": self.checkpoint,
            "train": asdict(self.train) if self.train else None,
            "knowledge": list(self.knowledge),
            "per_knowledge": self.per_knowledge,
            "candidates_per_knowledge": self.candidates_per_knowledge,
            "corpus_seed": self.corpus_seed,
            "thresholds": {k: {"act": t.act, "grad": t.grad} for k, t in sorted(self.thresholds.items())},
            "calibration": {"act_pct": self.act_pct, "grad_pct": self.grad_pct},
            "same_patch": self.same_patch,
            "absolute_diff": self.absolute_diff,
            "noise": {"levels": list(self.noise.levels), "samples": self.noise.samples,
                      "scale_mode": self.noise.scale_mode},
            "methods": list(self.methods),
            "seed": self.seed,
            "prompt": self.prompt,
            "max_new_tokens": self.max_new_tokens,
        }
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "RunConfig":
        known = {"model", "corpus", "thresholds", "calibration", "noise", "methods", "out",
                 "seed", "jobs", "prompt", "max_new_tokens", "same_patch", "absolute_diff",
                 "heatmaps", "metrics"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        cfg = cls(base_dir=base_dir or Path.cwd())
        model = doc.get("model", {})
        if "train" in model:
            cfg.train = TrainRecipe(**model["train"])
            cfg.checkpoint = model.get("checkpoint")
        else:
            cfg.checkpoint = model.get("checkpoint", BUNDLED_MODEL)
        corpus = doc.get("corpus", {})
        cfg.knowledge = tuple(corpus.get("knowledge", DEFAULT_KNOWLEDGE))
        cfg.per_knowledge = int(corpus.get("per_knowledge", cfg.per_knowledge))
        cfg.candidates_per_knowledge = int(corpus.get("candidates_per_knowledge",
                                                      cfg.candidates_per_knowledge))
        cfg.corpus_seed = int(corpus.get("seed", cfg.corpus_seed))
        try:
            cfg.thresholds = {k: Thresholds(float(v["act"]), float(v["grad"]))
                              for k, v in doc.get("thresholds", {}).items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad thresholds entry: {exc}") from exc
        cal = doc.get("calibration", {})
        cfg.act_pct = float(cal.get("act_pct", cfg.act_pct))
        cfg.grad_pct = float(cal.get("grad_pct", cfg.grad_pct))
        cfg.seed = int(doc.get("seed", 0))
        nz = doc.get("noise", {})
        try:
            cfg.noise = NoiseSpec(tuple(nz.get("levels", NoiseSpec.levels)),
                                  int(nz.get("samples", NoiseSpec.samples)), cfg.seed,
                                  nz.get("scale_mode", NoiseSpec.scale_mode))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.methods = tuple(doc.get("methods", METHODS))
        cfg.out = Path(doc.get("out", "run"))
        cfg.jobs = int(doc.get("jobs", 1))
        cfg.prompt = doc.get("prompt", PROMPT)
        cfg.max_new_tokens = int(doc.get("max_new_tokens", cfg.max_new_tokens))
        cfg.same_patch = bool(doc.get("same_patch", False))
        cfg.absolute_diff = bool(doc.get("absolute_diff", False))
        cfg.heatmaps = bool(doc.get("heatmaps", True))
        cfg.metrics = bool(doc.get("metrics", True))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        base = path.resolve().parent
        if not path.exists() and bundled_path(f"{path.name}.json").exists():
            # bundled configs write relative outputs under the working directory
            path, base = bundled_path(f"{path.name}.json"), Path.cwd()
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, base)

    def with_overrides(self, seed=None, out=None, jobs=None, methods=None) -> "RunConfig":
        if seed is not None:
            self.seed = int(seed)
            self.noise = NoiseSpec(self.noise.levels, self.noise.samples, self.seed,
                                   self.noise.scale_mode)
        if out is not None:
            self.out = Path(out).resolve()
        if jobs is not None:
            self.jobs = int(jobs)
        if methods:
            self.methods = tuple(methods)
        self.validate()
        return self


# ---------------------------------------------------------------------------
# knowledge samples
# ---------------------------------------------------------------------------


@dataclass
class KnowledgeSample:
    sample_id: str
    knowledge: str
    original: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    inpainted: np.ndarray = field(repr=False)
    other_bboxes: tuple = ()
    item: SceneItem | None = field(default=None, repr=False)
    caption_original: list[int] = field(default_factory=list)
    caption_inpainted: list[int] = field(default_factory=list)
    status: str = "pending"


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str = ""


def sample_from_scene(sample_id: str, k: str, item: SceneItem) -> KnowledgeSample:
    scene = item.scene
    original = item.render()
    target = [o for o in scene.objects if o.label == k]
    if not target:
        raise ConfigError(f"scene {sample_id} has no {k!r}")
    mask = bbox_mask(target[0].bbox, scene.height, scene.width)
    inpainted = inpaint(original, mask, "background_fill",
                        background=BACKGROUNDS[scene.background])
    others = tuple(o.bbox for o in scene.objects if o.label != k)
    return KnowledgeSample(sample_id, k, original, mask, inpainted, others, item)


def validate_sample(model: MultimodalLM, sample: KnowledgeSample, prompt: Sequence[int],
                    gen: GenConfig = GenConfig()) -> Validation:
    """Check the three admissibility rules; failures are returned, not raised."""
    caps = generate_batch(model, np.stack([sample.original, sample.inpainted]), prompt, gen)
    sample.caption_original, sample.caption_inpainted = caps
    words = [[model.vocab.words[t] for t in c] for c in caps]
    if not knowledge_presence(words[0], sample.knowledge):
        result = Validation(False, "ORIGINAL_MISSING_K")
    elif knowledge_presence(words[1], sample.knowledge):
        result = Validation(False, "INPAINT_CONTAINS_K")
    elif _mask_hits_other(sample):
        result = Validation(False, "MASK_OVERLAPS_OTHER")
    else:
        result = Validation(True)
    sample.status = "pass" if result.ok else result.reason
    return result


def _mask_hits_other(sample: KnowledgeSample) -> bool:
    H, W = sample.mask.shape
    for bb in sample.other_bboxes:
        if (sample.mask & bbox_mask(bb, H, W)).any():
            return True
    return False


# ---------------------------------------------------------------------------
# identification products
# ---------------------------------------------------------------------------


@dataclass
class Identified:
    sample: KnowledgeSample
    group: int
    thresholds: Thresholds
    n_candidates: int
    sets: dict[str, NeuronSet]
    acts: np.ndarray = field(repr=False)
    diff: np.ndarray = field(repr=False)


def identify_sample(model: MultimodalLM, sample: KnowledgeSample, group: int, prompt: Sequence[int],
                    cfg: RunConfig, rng: np.random.Generator) -> Identified:
    orig = image_activations(model, sample.original, prompt, sample.sample_id)
    inp = image_activations(model, sample.inpainted, prompt, sample.sample_id + ":inpainted")
    diff = activation_diff(orig, inp, sample.knowledge, absolute=cfg.absolute_diff)
    prefix, c = caption_prefix(prompt, sample.caption_original, sample.knowledge, model)
    g = gradcam(model, sample.original, prefix, c)
    thr = cfg.thresholds.get(sample.knowledge) or calibrate_thresholds(
        diff.values, g, cfg.act_pct, cfg.grad_pct)
    cands = candidate_set(diff, thr.act)
    same = diff.values > thr.act if cfg.same_patch else None
    final = final_set(cands, g, thr.grad, same)
    n = len(final)
    label = f"{sample.knowledge}/{group}"
    sets = {}
    for method in cfg.methods:
        if method == "ours":
            s = final
        elif method == "gradient_baseline":
            s = top_k(gradient_scores(g), n)
        elif method == "actweight_baseline":
            s = top_k(actweight_scores(orig.values, value_logit_weights(model, c)), n)
        else:
            s = random_set(model.config.n_layers, model.config.d_ff, n, rng)
        s.label = label
        sets[method] = s
    return Identified(sample, group, thr, len(cands), sets, orig.values, diff.values)


# ---------------------------------------------------------------------------
# the run
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _words(model: MultimodalLM, ids) -> str:
    return " ".join(model.vocab.words[t] for t in ids)


class Run:
    """Stage-sequential run with lazily computed, cached stage outputs."""

    def __init__(self, cfg: RunConfig, model: MultimodalLM | None = None):
        cfg.validate()
        self.cfg = cfg
        self.out = cfg.out_dir
        self.timings: dict[str, float] = {}
        self._model = model
        self._candidates: list[KnowledgeSample] | None = None
        self._samples: dict[str, list[KnowledgeSample]] | None = None
        self._identified: list[Identified] | None = None
        self._results: list[PerturbResult] | None = None
        self._scale: float | None = None

    def _timed(self, name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def _path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # -- model ----------------------------------------------------------
    @property
    def model(self) -> MultimodalLM:
        if self._model is None:
            self._model = self._timed("model", self._load_model)
        return self._model

    def _load_model(self) -> MultimodalLM:
        ck = self.cfg.checkpoint
        if ck == BUNDLED_MODEL:
            return load_reference_model()
        if ck is not None and self.cfg.resolve(ck).exists():
            return MultimodalLM.load(self.cfg.resolve(ck))
        if self.cfg.train is None:
            raise StageError(f"checkpoint {ck} not found and no training recipe given")
        model, losses = train_reference(self.cfg.train)
        path = self.cfg.resolve(ck) if ck else self._path("model.npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path)
        with open(self._path("train_loss.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows((i, repr(x)) for i, x in enumerate(losses))
        return model

    def train_model(self, out_path: Path) -> MultimodalLM:
        recipe = self.cfg.train or TrainRecipe()
        model, losses = self._timed("train", lambda: train_reference(recipe))
        out_path.parent.mkdir(parents=True, exist_ok=True)
        model.save(out_path)
        self._model = model
        return model

    @property
    def prompt(self) -> list[int]:
        return self.model.prompt_ids(self.cfg.prompt)

    # -- corpus ---------------------------------------------------------
    def candidates(self) -> list[KnowledgeSample]:
        if self._candidates is None:
            self._candidates = self._timed("corpus", self._build_candidates)
        return self._candidates

    def _build_candidates(self) -> list[KnowledgeSample]:
        scenes = knowledge_scenes(self.cfg.knowledge, self.cfg.candidates_per_knowledge,
                                  self.cfg.corpus_seed)
        out = []
        for k in self.cfg.knowledge:
            for j, item in enumerate(scenes[k]):
                out.append(sample_from_scene(f"{k}-{j:02d}", k, item))
        return out

    def samples(self) -> dict[str, list[KnowledgeSample]]:
        """Validated samples, the first ``per_knowledge`` passing ones per knowledge."""
        if self._samples is None:
            self._samples = self._timed("validate", self._validate)
        return self._samples

    def _validate(self) -> dict[str, list[KnowledgeSample]]:
        gen = self.cfg.gen(self.model)
        chosen: dict[str, list[KnowledgeSample]] = {k: [] for k in self.cfg.knowledge}
        for s in self.candidates():
            validate_sample(self.model, s, self.prompt, gen)
            if s.status == "pass" and len(chosen[s.knowledge]) < self.cfg.per_knowledge:
                chosen[s.knowledge].append(s)
        missing = [k for k, v in chosen.items() if not v]
        if missing:
            raise StageError(f"no validated samples for knowledge {missing}")
        return chosen

    def write_candidates(self) -> None:
        for s in self.candidates():
            write_ppm(self._path("corpus", "images", f"{s.sample_id}_original.ppm"), s.original)
            write_ppm(self._path("corpus", "images", f"{s.sample_id}_inpainted.ppm"), s.inpainted)
        save_corpus_spec(self._path("corpus", "scenes.json"),
                         [(s.item.scene, s.item.seed) for s in self.candidates() if s.item])

    def write_corpus(self) -> None:
        chosen = {s.sample_id for v in self.samples().values() for s in v}
        with open(self._path("corpus", "corpus.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "k", "status", "selected", "caption_original",
                        "caption_inpainted"])
            for s in self.candidates():
                w.writerow([s.sample_id, s.knowledge, s.status, int(s.sample_id in chosen),
                            _words(self.model, s.caption_original),
                            _words(self.model, s.caption_inpainted)])

    # -- identification ---------------------------------------------------
    def identified(self) -> list[Identified]:
        if self._identified is None:
            self._identified = self._timed("identify", self._identify)
        return self._identified

    def _identify(self) -> list[Identified]:
        out = []
        for ki, k in enumerate(self.cfg.knowledge):
            for gi, s in enumerate(self.samples()[k]):
                rng = np.random.default_rng([self.cfg.seed, ki, gi])
                out.append(identify_sample(self.model, s, gi, self.prompt, self.cfg, rng))
        return out

    def activation_scale(self) -> float:
        """Std of image-token activations over the validated originals."""
        if self._scale is None:
            self._scale = float(np.std(np.stack([r.acts for r in self.identified()])))
        return self._scale

    def write_identification(self) -> None:
        model = self.model
        L = model.config.n_layers
        with open(self._path("identify", "thresholds.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "group", "sample_id", "threshold_a", "threshold_g",
                        "n_candidates", "n_final"])
            for r in self.identified():
                w.writerow([r.sample.knowledge, r.group, r.sample.sample_id, repr(r.thresholds.act),
                            repr(r.thresholds.grad), r.n_candidates, len(r.sets.get("ours", []))
                            if "ours" in r.sets else len(next(iter(r.sets.values())))])
        for method in self.cfg.methods:
            sets = [r.sets[method] for r in self.identified()]
            write_histogram_csv(self._path("identify", f"layers_{method}.csv"),
                                layer_histogram(sets, L))
            for r in self.identified():
                r.sets[method].save(self._path(
                    "identify", "neurons", f"{r.sample.knowledge}_{r.group}_{method}.json"))
        decode_set = "ours" if "ours" in self.cfg.methods else self.cfg.methods[0]
        with open(self._path("identify", "decode.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "group", "method", "layer", "unit", "rank", "token", "value"])
            for r in self.identified():
                for n in r.sets[decode_set]:
                    for rank, (tok, val) in enumerate(decode_neuron(model, n, 5)):
                        w.writerow([r.sample.knowledge, r.group, decode_set, n.layer, n.unit,
                                    rank + 1, tok, repr(val)])
        if self.cfg.heatmaps and "ours" in self.cfg.methods:
            grid = model.config.patch_grid
            for r in self.identified():
                vals = heatmap_values(r.acts, r.diff, r.sets["ours"], top=5)
                big = np.kron(r.sample.original, np.ones((8, 8, 1), dtype=np.uint8))
                write_ppm(self._path("heatmaps", f"{r.sample.knowledge}_{r.group}.ppm"),
                          heatmap_overlay(vals, grid, big))

    # -- perturbation -----------------------------------------------------
    def eval_images(self) -> list[EvalImage]:
        return [EvalImage(s.sample_id, s.knowledge, s.original)
                for k in self.cfg.knowledge for s in self.samples()[k]]

    def results(self) -> list[PerturbResult]:
        if self._results is None:
            self._results = self._timed("perturb", self._perturb)
        return self._results

    def _perturb(self) -> list[PerturbResult]:
        groups = {(r.sample.knowledge, m, r.group): s
                  for r in self.identified() for m, s in r.sets.items()}
        return run_cells(self.model, self.eval_images(), groups, self.cfg.noise, self.prompt,
                         self.cfg.gen(self.model), self.activation_scale(), self.cfg.jobs)

    def write_results(self) -> None:
        write_results_csv(self._path("perturb", "results.csv"), self.results())

    # -- reports ----------------------------------------------------------
    def masked_caption_metrics(self) -> dict[str, MetricReport]:
        model = self.model
        masked = {s.sample_id: list(self.prompt) + s.caption_inpainted
                  for v in self.samples().values() for s in v}
        E = model.params["tok_emb"]
        per_method: dict[str, list[MetricReport]] = {}
        for r in self.results():
            if r.image_k != r.k:
                continue
            cand = list(self.prompt) + model.vocab.encode(r.caption)
            per_method.setdefault(r.method, []).append(compare(cand, masked[r.image_id], E))
        return {m: mean_report(v) for m, v in sorted(per_method.items())}

    def write_reports(self) -> None:
        rows = suppression_scores(self.results())
        write_scores_csv(self._path("report", "scores.csv"), rows)
        if self.cfg.metrics:
            with open(self._path("report", "metrics.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                cols = list(MetricReport.__dataclass_fields__)
                w.writerow(["method"] + cols)
                for m, rep in self.masked_caption_metrics().items():
                    w.writerow([m] + [repr(getattr(rep, c)) for c in cols])
        for m, row in sorted(average_rows(rows).items()):
            log.info("%-20s S_se=%s S_re=%s S_mean=%s", m, row.S_se, row.S_re, row.S_mean)

    # -- manifest ---------------------------------------------------------
    def write_manifest(self, command: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        artifacts = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                artifacts[str(p.relative_to(self.out))] = _sha256(p)
        doc = {
            "command": command,
            "config": self.cfg.to_json(),
            "config_sha256": self.cfg.digest(),
            "seeds": {"run": self.cfg.seed, "noise_base": self.cfg.noise.base_seed,
                      "corpus": self.cfg.corpus_seed},
            "activation_scale": self._scale,
            "versions": {"kneurons": __version__, "numpy": np.__version__,
                         "python": platform.python_version(), "numba_kernels": _kernels.USE_NUMBA},
            "timings_s": {k: round(v, 3) for k, v in self.timings.items()},
            "artifacts": artifacts,
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))
        return path


def verify_manifest(run_dir) -> list[str]:
    """Artifacts whose current hash differs from the manifest (empty when intact)."""
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "manifest.json").read_text())
    return [rel for rel, h in doc["artifacts"].items()
            if not (run_dir / rel).exists() or _sha256(run_dir / rel) != h]


def run_pipeline(cfg: RunConfig, model: MultimodalLM | None = None) -> Path:
    """Execute every stage and return the run directory."""
    run = Run(cfg, model)
    run.write_candidates()
    run.write_corpus()
    run.write_identification()
    run.write_results()
    run.write_reports()
    run.write_manifest("run")
    return run.out
