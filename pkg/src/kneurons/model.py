"""Toy multimodal decoder: patch encoder -> linear projector -> causal LM.

The input sequence is ``(img_1 .. img_P, text_1 .. text_T)``. Each block is
pre-norm::

    r = h + Attn(LN1(h))
    O = gelu(W_in LN2(r) + b_in)        # captured FFN activations
    h' = r + W_out O + b_out

Projected patch features act as soft-prompt tokens. All math is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from . import numerics as nx
from .numerics import GradTape, Tensor
from .vocab import DEFAULT_VOCAB, PROMPT, Vocab

CHECKPOINT_FORMAT = "kneurons-checkpoint/1"


class ModelError(ValueError):
    pass


class SequenceOverflow(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    vocab_size: int = len(DEFAULT_VOCAB)
    patch_grid: tuple[int, int] = (4, 4)
    image_hw: tuple[int, int] = (32, 32)
    d_enc: int = 32
    max_seq: int = 32
    activation: str = "gelu"

    @property
    def n_image_tokens(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def patch_hw(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.patch_grid[0], self.image_hw[1] // self.patch_grid[1])

    @property
    def patch_dim(self) -> int:
        ph, pw = self.patch_hw
        return ph * pw * 3

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.d_ff < self.d_model:
            raise ModelError("d_ff must be >= d_model")
        if self.image_hw[0] % self.patch_grid[0] or self.image_hw[1] % self.patch_grid[1]:
            raise ModelError("image dims must be divisible by the patch grid")
        if self.activation != "gelu":
            raise ModelError("only gelu activation is supported")
        if self.n_image_tokens >= self.max_seq:
            raise ModelError("max_seq leaves no room for text")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("patch_grid", "image_hw"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class GenConfig:
    """Greedy decoding settings.

    ``min_length`` counts prompt plus generated tokens, so the default of 1
    never blocks EOS after a non-empty prompt.
    """

    max_new_tokens: int = 12
    min_length: int = 1
    eos_id: int = DEFAULT_VOCAB.eos_id

    def __post_init__(self):
        if self.max_new_tokens < 0:
            raise ModelError("max_new_tokens must be >= 0")


@dataclass(frozen=True)
class Intervention:
    """Additive noise ``v[p]`` on FFN units ``targets`` at image position ``p``."""

    targets: tuple[tuple[int, int], ...]
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple((int(l), int(i)) for l, i in self.targets))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(-1))

    def is_empty(self) -> bool:
        return not self.targets

    def units_by_layer(self) -> dict[int, np.ndarray]:
        out: dict[int, list[int]] = {}
        for l, i in self.targets:
            out.setdefault(l, []).append(i)
        return {l: np.array(sorted(set(u)), dtype=np.int64) for l, u in out.items()}


@dataclass
class ActivationRecord:
    """FFN activations ``O`` (L, S, d_f) and FFN inputs (L, S, h) for one sequence."""

    O: np.ndarray
    ffn_inputs: np.ndarray
    n_image_tokens: int

    def image_slice(self) -> np.ndarray:
        return self.O[:, : self.n_image_tokens, :]


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {
        "enc_w": (cfg.patch_dim, cfg.d_enc),
        "enc_b": (cfg.d_enc,),
        "proj_w": (cfg.d_enc, h),
        "proj_b": (h,),
        "tok_emb": (V, h),
        "pos_emb": (cfg.max_seq, h),
        "lnf_g": (h,),
        "lnf_b": (h,),
        "unembed_w": (h, V),
        "unembed_b": (V,),
    }
    for l in range(cfg.n_layers):
        shapes.update({
            f"l{l}.ln1_g": (h,), f"l{l}.ln1_b": (h,),
            f"l{l}.qkv_w": (h, 3 * h), f"l{l}.qkv_b": (3 * h,),
            f"l{l}.attn_out_w": (h, h), f"l{l}.attn_out_b": (h,),
            f"l{l}.ln2_g": (h,), f"l{l}.ln2_b": (h,),
            f"l{l}.ffn_in_w": (h, f), f"l{l}.ffn_in_b": (f,),
            f"l{l}.ffn_out_w": (f, h), f"l{l}.ffn_out_b": (h,),
        })
    return shapes


@dataclass
class MultimodalLM:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocab = field(default_factory=lambda: DEFAULT_VOCAB)

    def __post_init__(self):
        self.config.validate()
        if len(self.vocab) != self.config.vocab_size:
            raise ModelError("vocabulary size does not match config")
        shapes = _param_shapes(self.config)
        missing = set(shapes) - set(self.params)
        if missing:
            raise ModelError(f"missing parameters: {sorted(missing)[:5]}")
        for name, shp in shapes.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shp:
                raise ModelError(f"parameter {name} has shape {arr.shape}, expected {shp}")
            if not np.isfinite(arr).all():
                raise ModelError(f"parameter {name} is not finite")
            self.params[name] = arr

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0,
             vocab: Vocab = DEFAULT_VOCAB) -> "MultimodalLM":
        cfg = config or ModelConfig(vocab_size=len(vocab))
        cfg.validate()
        rng = np.random.default_rng(seed)
        params = {}
        resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
        for name, shp in _param_shapes(cfg).items():
            base = name.split(".")[-1]
            if base.endswith("_g"):
                params[name] = np.ones(shp)
            elif base.endswith("_b"):
                params[name] = np.zeros(shp)
            elif base == "enc_w":
                params[name] = rng.normal(0, 1 / math.sqrt(shp[0]), shp)
            elif base == "proj_w":
                params[name] = rng.normal(0, 1 / math.sqrt(shp[0]), shp)
            elif base in ("tok_emb", "pos_emb"):
                params[name] = rng.normal(0, 0.1, shp)
            elif base in ("attn_out_w", "ffn_out_w"):
                params[name] = rng.normal(0, resid_std, shp)
            else:
                params[name] = rng.normal(0, 0.02, shp)
        return cls(cfg, params, vocab)

    def copy(self) -> "MultimodalLM":
        return MultimodalLM(self.config, {k: v.copy() for k, v in self.params.items()}, self.vocab)

    def unembedding(self) -> np.ndarray:
        """Unembedding matrix U of shape (V, h)."""
        return self.params["unembed_w"].T

    def ffn_out(self, layer: int) -> np.ndarray:
        """W_out of ``layer`` as an (h, d_f) matrix; column i is unit i's value vector."""
        return self.params[f"l{layer}.ffn_out_w"].T

    def prompt_ids(self, prompt: str = PROMPT) -> list[int]:
        return self.vocab.encode(prompt)

    # -- checkpoints -----------------------------------------------------
    def save(self, path) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "vocab": self.vocab.words,
        }
        arrays = {k: v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "MultimodalLM":
        with np.load(Path(path), allow_pickle=False) as z:
            try:
                meta = json.loads(str(z["__meta__"]))
            except KeyError as exc:
                raise ModelError(f"{path}: not a kneurons checkpoint") from exc
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ModelError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
            params = {k: z[k].copy() for k in z.files if k != "__meta__"}
        return cls(ModelConfig.from_dict(meta["config"]), params, Vocab(meta["vocab"]))


# ---------------------------------------------------------------------------
# image embedding
# ---------------------------------------------------------------------------


def patchify(pixels: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(..., H, W, 3) raster -> (..., P, patch_dim) in row-major patch order, scaled to [0, 1]."""
    pixels = np.asarray(pixels)
    H, W = pixels.shape[-3], pixels.shape[-2]
    rows, cols = config.patch_grid
    if H % rows or W % cols:
        raise nx.ShapeError(f"image {H}x{W} not divisible by patch grid {rows}x{cols}")
    if (H, W) != tuple(config.image_hw):
        raise nx.ShapeError(f"image {H}x{W} does not match model input {config.image_hw}")
    ph, pw = H // rows, W // cols
    lead = pixels.shape[:-3]
    x = pixels.astype(np.float64).reshape(*lead, rows, ph, cols, pw, 3)
    x = np.moveaxis(x, -4, -3)  # (..., rows, cols, ph, pw, 3)
    return x.reshape(*lead, rows * cols, ph * pw * 3) / 255.0


def _embed_patches(model: MultimodalLM, patches, params=None) -> Tensor:
    p = params or model.params
    feats = nx.add(nx.matmul(patches, p["enc_w"]), p["enc_b"])
    return nx.add(nx.matmul(feats, p["proj_w"]), p["proj_b"])


def embed_image(pixels: np.ndarray, model: MultimodalLM) -> np.ndarray:
    """Image token embeddings (P, h), or (B, P, h) for a batch of rasters."""
    return _embed_patches(model, patchify(pixels, model.config)).data


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _layer_deltas(interventions, cfg: ModelConfig, B: int, S: int) -> dict[int, np.ndarray]:
    if interventions is None:
        return {}
    if isinstance(interventions, Intervention):
        interventions = [interventions] * B
    P = cfg.n_image_tokens
    deltas: dict[int, np.ndarray] = {}
    for b, iv in enumerate(interventions):
        if iv is None or iv.is_empty():
            continue
        if iv.v.shape != (P,):
            raise ModelError(f"noise vector has length {iv.v.size}, expected {P}")
        for l, units in iv.units_by_layer().items():
            if not 0 <= l < cfg.n_layers or units.min() < 0 or units.max() >= cfg.d_ff:
                raise ModelError(f"intervention target out of range at layer {l}")
            d = deltas.get(l)
            if d is None:
                d = deltas[l] = np.zeros((B, S, cfg.d_ff))
            d[b, :P, units] += iv.v[None, :]
    return deltas


def _check_ids(model: MultimodalLM, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise ModelError("unknown token id")


def _forward(
    model: MultimodalLM,
    img_emb: Tensor,
    text_ids: np.ndarray,
    deltas: dict[int, np.ndarray] | None = None,
    params: dict | None = None,
    probes: Sequence[Tensor] | None = None,
    keep_cache: bool = False,
):
    """Batched forward. Returns (logits Tensor, O list, FFN-input list, kv cache)."""
    cfg = model.config
    p = params or model.params
    B, P = img_emb.shape[0], img_emb.shape[1]
    T = text_ids.shape[1]
    S = P + T
    if S > cfg.max_seq:
        raise SequenceOverflow(f"sequence length {S} exceeds max_seq {cfg.max_seq}")
    _check_ids(model, text_ids)
    h, nh = cfg.d_model, cfg.n_heads
    dh = h // nh
    tok = nx.take_rows(p["tok_emb"], text_ids)
    x = nx.add(nx.concat([img_emb, tok], axis=1), nx.getitem(p["pos_emb"], slice(0, S)))
    causal = np.tril(np.ones((S, S), dtype=bool))
    acts, ffn_inputs, cache = [], [], []
    deltas = deltas or {}
    for l in range(cfg.n_layers):
        pre = f"l{l}."
        xl = nx.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        qkv = nx.reshape(nx.add(nx.matmul(xl, p[pre + "qkv_w"]), p[pre + "qkv_b"]),
                         (B, S, 3, nh, dh))
        q = nx.swapaxes(nx.getitem(qkv, (slice(None), slice(None), 0)), 1, 2)
        k = nx.swapaxes(nx.getitem(qkv, (slice(None), slice(None), 1)), 1, 2)
        v = nx.swapaxes(nx.getitem(qkv, (slice(None), slice(None), 2)), 1, 2)
        if keep_cache:
            cache.append((k.data, v.data))
        scores = nx.scale(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        att = nx.softmax_rows(scores, causal)
        y = nx.reshape(nx.swapaxes(nx.matmul(att, v), 1, 2), (B, S, h))
        r = nx.add(x, nx.add(nx.matmul(y, p[pre + "attn_out_w"]), p[pre + "attn_out_b"]))
        u = nx.layer_norm(r, p[pre + "ln2_g"], p[pre + "ln2_b"])
        O = nx.gelu(nx.add(nx.matmul(u, p[pre + "ffn_in_w"]), p[pre + "ffn_in_b"]))
        if l in deltas:
            O = nx.add(O, deltas[l])
        if probes is not None:
            O = nx.add(O, probes[l])
        acts.append(O)
        ffn_inputs.append(u)
        m = nx.add(nx.matmul(O, p[pre + "ffn_out_w"]), p[pre + "ffn_out_b"])
        x = nx.add(r, m)
    xf = nx.layer_norm(x, p["lnf_g"], p["lnf_b"])
    logits = nx.add(nx.matmul(xf, p["unembed_w"]), p["unembed_b"])
    return logits, acts, ffn_inputs, cache


def forward_with_capture(
    model: MultimodalLM,
    image_tokens: np.ndarray,
    text_ids: Sequence[int],
    intervention: Intervention | None = None,
) -> tuple[np.ndarray, ActivationRecord]:
    """Logits (S, V) and the full activation record for one sequence."""
    img = np.asarray(image_tokens, dtype=np.float64)
    if img.shape != (model.config.n_image_tokens, model.config.d_model):
        raise nx.ShapeError(f"image tokens must be (P, h), got {img.shape}")
    ids = np.asarray([list(text_ids)], dtype=np.int64)
    S = img.shape[0] + ids.shape[1]
    deltas = _layer_deltas(intervention, model.config, 1, S)
    logits, acts, ffn_inputs, _ = _forward(model, Tensor(img[None]), ids, deltas)
    rec = ActivationRecord(
        O=np.stack([a.data[0] for a in acts]),
        ffn_inputs=np.stack([u.data[0] for u in ffn_inputs]),
        n_image_tokens=img.shape[0],
    )
    return logits.data[0], rec


# ---------------------------------------------------------------------------
# cached greedy decoding
# ---------------------------------------------------------------------------


def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b




def _decode_step(model: MultimodalLM, ids: np.ndarray, pos: int, kcache, vcache) -> np.ndarray:
    """One token per sequence at position ``pos``; caches hold positions < pos."""
    cfg, p = model.config, model.params
    B = ids.shape[0]
    h, nh = cfg.d_model, cfg.n_heads
    dh = h // nh
    x = p["tok_emb"][ids] + p["pos_emb"][pos]
    for l in range(cfg.n_layers):
        pre = f"l{l}."
        qkv = (_ln_np(x, p[pre + "ln1_g"], p[pre + "ln1_b"]) @ p[pre + "qkv_w"]
               + p[pre + "qkv_b"]).reshape(B, 3, nh, dh)
        kcache[l][:, :, pos] = qkv[:, 1]
        vcache[l][:, :, pos] = qkv[:, 2]
        K = kcache[l][:, :, : pos + 1]
        Vv = vcache[l][:, :, : pos + 1]
        s = np.einsum("bhd,bhtd->bht", qkv[:, 0], K) / math.sqrt(dh)
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s /= s.sum(axis=-1, keepdims=True)
        y = np.einsum("bht,bhtd->bhd", s, Vv).reshape(B, h)
        r = x + y @ p[pre + "attn_out_w"] + p[pre + "attn_out_b"]
        u = _ln_np(r, p[pre + "ln2_g"], p[pre + "ln2_b"])
        O = _kernels.gelu(u @ p[pre + "ffn_in_w"] + p[pre + "ffn_in_b"])
        x = r + O @ p[pre + "ffn_out_w"] + p[pre + "ffn_out_b"]
    return _ln_np(x, p["lnf_g"], p["lnf_b"]) @ p["unembed_w"] + p["unembed_b"]


def _pick(logits: np.ndarray, gen: GenConfig, cur_len: int) -> np.ndarray:
    if cur_len < gen.min_length:
        logits = logits.copy()
        logits[:, gen.eos_id] = -np.finfo(np.float64).max
    return np.argmax(logits, axis=-1)


def generate_batch(
    model: MultimodalLM,
    images: np.ndarray,
    prompt: Sequence[int],
    gen: GenConfig = GenConfig(),
    interventions: Sequence[Intervention | None] | Intervention | None = None,
    image_tokens: np.ndarray | None = None,
) -> list[list[int]]:
    """Greedy continuations for a batch of images sharing one prompt.

    The image and prompt prefix is run once with the interventions applied;
    image positions never attend to later tokens, so their perturbed
    activations are identical at every decoding step.
    """
    cfg = model.config
    prompt = list(prompt)
    if not prompt:
        raise ModelError("prompt must be non-empty")
    emb = embed_image(images, model) if image_tokens is None else np.asarray(image_tokens)
    if emb.ndim == 2:
        emb = emb[None]
    B, P = emb.shape[0], emb.shape[1]
    if gen.max_new_tokens == 0:
        return [[] for _ in range(B)]
    S0 = P + len(prompt)
    if S0 + gen.max_new_tokens - 1 > cfg.max_seq:
        raise SequenceOverflow("prompt plus max_new_tokens exceeds max_seq")
    ids = np.tile(np.asarray(prompt, dtype=np.int64), (B, 1))
    deltas = _layer_deltas(interventions, cfg, B, S0)
    logits, _, _, cache = _forward(model, Tensor(emb), ids, deltas, keep_cache=True)
    nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    kc, vc = [], []
    for k, v in cache:
        kk = np.zeros((B, nh, cfg.max_seq, dh))
        vv = np.zeros((B, nh, cfg.max_seq, dh))
        kk[:, :, :S0] = k
        vv[:, :, :S0] = v
        kc.append(kk)
        vc.append(vv)
    out = np.full((B, gen.max_new_tokens), gen.eos_id, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    nxt = _pick(logits.data[:, -1], gen, len(prompt))
    for step in range(gen.max_new_tokens):
        nxt = np.where(done, gen.eos_id, nxt)
        out[:, step] = nxt
        done |= nxt == gen.eos_id
        if done.all() or step == gen.max_new_tokens - 1:
            break
        step_logits = _decode_step(model, nxt, S0 + step, kc, vc)
        nxt = _pick(step_logits, gen, len(prompt) + step + 1)
    result = []
    for row in out:
        toks = []
        for t in row:
            if t == gen.eos_id:
                break
            toks.append(int(t))
        result.append(toks)
    return result


def generate(
    model: MultimodalLM,
    image: np.ndarray,
    prompt: Sequence[int],
    gen: GenConfig = GenConfig(),
    intervention: Intervention | None = None,
) -> list[int]:
    return generate_batch(model, np.asarray(image)[None], prompt, gen,
                          None if intervention is None else [intervention])[0]


# ---------------------------------------------------------------------------
# traced target logit
# ---------------------------------------------------------------------------


@dataclass
class TracedLogit:
    value: Tensor
    probes: list[Tensor]
    record: ActivationRecord
    tape: GradTape

    def activation_grads(self) -> np.ndarray:
        """d y_c / d O as an (L, S, d_f) array."""
        grads = self.tape.gradient(self.value, self.probes)
        return np.stack([g[0] for g in grads])


def target_logit(
    model: MultimodalLM,
    image: np.ndarray,
    prefix: Sequence[int],
    c: int,
    intervention: Intervention | None = None,
) -> TracedLogit:
    """Pre-softmax logit of token ``c`` at the last prefix position, traced to O."""
    cfg = model.config
    if not 0 <= int(c) < cfg.vocab_size:
        raise ModelError(f"token id {c} not in vocabulary")
    prefix = list(prefix)
    if not prefix:
        raise ModelError("prefix must be non-empty")
    emb = Tensor(embed_image(np.asarray(image)[None], model))
    ids = np.asarray([prefix], dtype=np.int64)
    S = cfg.n_image_tokens + len(prefix)
    deltas = _layer_deltas(intervention, cfg, 1, S)
    tape = GradTape()
    with tape:
        probes = [tape.watch(np.zeros((1, S, cfg.d_ff))) for _ in range(cfg.n_layers)]
        logits, acts, ffn_inputs, _ = _forward(model, emb, ids, deltas, probes=probes)
        y = nx.getitem(logits, (0, S - 1, int(c)))
    rec = ActivationRecord(
        O=np.stack([a.data[0] for a in acts]),
        ffn_inputs=np.stack([u.data[0] for u in ffn_inputs]),
        n_image_tokens=cfg.n_image_tokens,
    )
    return TracedLogit(y, probes, rec, tape)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitParams:
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    warmup: int = 50
    weight_decay: float = 0.0
    clip: float = 1.0


def _pad_batch(captions: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(c) for c in captions)
    ids = np.full((len(captions), T), pad_id, dtype=np.int64)
    valid = np.zeros((len(captions), T), dtype=bool)
    for b, c in enumerate(captions):
        ids[b, : len(c)] = c
        valid[b, : len(c)] = True
    return ids, valid


def caption_loss(model: MultimodalLM, params: dict, images: np.ndarray,
                 captions: Sequence[Sequence[int]]) -> Tensor:
    """Teacher-forced next-token cross-entropy over text positions."""
    ids, valid = _pad_batch(captions, model.vocab.pad_id)
    P = model.config.n_image_tokens
    emb = _embed_patches(model, patchify(images, model.config), params)
    logits, _, _, _ = _forward(model, emb, ids, params=params)
    text_logits = nx.getitem(logits, (slice(None), slice(P, P + ids.shape[1] - 1)))
    return nx.cross_entropy(text_logits, ids[:, 1:], valid[:, 1:].astype(np.float64))


def fit(
    model: MultimodalLM,
    corpus: Sequence[tuple[np.ndarray, Sequence[int]]],
    hp: FitParams = FitParams(),
    log_every: int = 0,
    logger=None,
) -> tuple[MultimodalLM, list[float]]:
    """Adam on teacher-forced caption loss. Returns a new model and per-step losses."""
    if not corpus:
        raise ModelError("training corpus is empty")
    images = np.stack([np.asarray(img) for img, _ in corpus])
    captions = [list(c) for _, c in corpus]
    trained = model.copy()
    names = sorted(trained.params)
    m1 = {k: np.zeros_like(trained.params[k]) for k in names}
    m2 = {k: np.zeros_like(trained.params[k]) for k in names}
    b1, b2, eps = 0.9, 0.98, 1e-9
    rng = np.random.default_rng(hp.seed)
    losses: list[float] = []
    n = len(corpus)
    for step in range(hp.steps):
        idx = rng.choice(n, size=min(hp.batch_size, n), replace=n < hp.batch_size)
        tape = GradTape()
        with tape:
            leaves = {k: tape.watch(trained.params[k]) for k in names}
            loss = caption_loss(trained, leaves, images[idx], [captions[i] for i in idx])
        grads = tape.gradient(loss, [leaves[k] for k in names])
        losses.append(loss.item())
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        clip = min(1.0, hp.clip / (gnorm + 1e-12)) if hp.clip else 1.0
        warm = min(1.0, (step + 1) / max(hp.warmup, 1))
        lr = hp.lr * warm * 0.5 * (1 + math.cos(math.pi * step / hp.steps))
        t = step + 1
        for k, g in zip(names, grads):
            g = g * clip
            m1[k] = b1 * m1[k] + (1 - b1) * g
            m2[k] = b2 * m2[k] + (1 - b2) * g * g
            upd = (m1[k] / (1 - b1**t)) / (np.sqrt(m2[k] / (1 - b2**t)) + eps)
            if hp.weight_decay and k.endswith("_w"):
                upd = upd + hp.weight_decay * trained.params[k]
            trained.params[k] = trained.params[k] - lr * upd
        if log_every and logger is not None and (step % log_every == 0 or step == hp.steps - 1):
            logger.info("step %d loss %.4f", step, losses[-1])
    return trained, losses
