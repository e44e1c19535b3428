"""Toy CLIP-style dual encoder: a patch transformer and a token transformer.

Both towers use pre-norm blocks (LN -> sublayer -> residual) with GELU
feed-forward layers.  The image tower pools its CLS position; the text tower
pools the EOS position.  Outputs are L2-normalised embeddings of size
``embed_dim`` and the similarity logits are scaled by ``exp(log_logit_scale)``,
clamped to at most 100.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ContractError, DimensionError, InputError
from .rng import substream

PAD_ID, BOS_ID, EOS_ID, WILDCARD_ID = 0, 1, 2, 3
MAX_LOGIT_SCALE = 100.0
DEFAULT_LOGIT_SCALE = 50.0
LN_EPS = 1e-5

LAYER_ROLES = (
    "ln1_g", "ln1_b",
    "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b",
    "ln2_g", "ln2_b",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b",
)


@dataclass(frozen=True)
class EncoderConfig:
    kind: str  # "text" or "image"
    width: int = 64
    depth: int = 8
    heads: int = 4
    embed_dim: int = 32
    ffn_mult: int = 4
    vocab_size: int = 64
    seq_len: int = 16
    grid: int = 4
    patch: int = 2
    channels: int = 3

    def __post_init__(self):
        if self.kind not in ("text", "image"):
            raise ContractError(f"encoder kind must be 'text' or 'image', got {self.kind!r}")
        for name in ("width", "depth", "heads", "embed_dim", "ffn_mult", "vocab_size", "seq_len",
                     "grid", "patch", "channels"):
            if getattr(self, name) < 1:
                raise ContractError(f"EncoderConfig.{name} must be >= 1")
        if self.width % self.heads:
            raise ContractError(f"width {self.width} is not divisible by heads {self.heads}")

    @property
    def hidden(self) -> int:
        return self.ffn_mult * self.width

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def n_positions(self) -> int:
        return self.seq_len if self.kind == "text" else self.grid * self.grid + 1

    def resized(self, width: int, depth: int) -> "EncoderConfig":
        return replace(self, width=width, depth=depth)


def global_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.width
    if cfg.kind == "text":
        shapes = {"tok_emb": (cfg.vocab_size, d)}
    else:
        shapes = {"patch_w": (d, cfg.patch_dim), "patch_b": (d,), "cls": (d,)}
    shapes.update({"pos": (cfg.n_positions, d), "lnf_g": (d,), "lnf_b": (d,), "proj": (cfg.embed_dim, d)})
    return shapes


def layer_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.width, cfg.hidden
    return {
        "ln1_g": (d,), "ln1_b": (d,),
        "q_w": (d, d), "q_b": (d,), "k_w": (d, d), "k_b": (d,),
        "v_w": (d, d), "v_b": (d,), "o_w": (d, d), "o_b": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "fc1_w": (f, d), "fc1_b": (f,), "fc2_w": (d, f), "fc2_b": (d,),
    }


def closed_form_param_count(cfg: EncoderConfig) -> int:
    """Learnable scalars of one tower, computed from the config alone."""
    d, f, e = cfg.width, cfg.hidden, cfg.embed_dim
    per_layer = 4 * (d * d + d) + (f * d + f) + (d * f + d) + 4 * d
    if cfg.kind == "text":
        stem = cfg.vocab_size * d
    else:
        stem = d * cfg.patch_dim + d + d
    return stem + cfg.n_positions * d + cfg.depth * per_layer + 2 * d + e * d


@dataclass
class EncoderWeights:
    config: EncoderConfig
    globals: dict[str, Tensor]
    layers: list[dict[str, Tensor]]

    def named_parameters(self, prefix: str = ""):
        for name, t in self.globals.items():
            yield f"{prefix}{name}", t
        for i, layer in enumerate(self.layers):
            for role in LAYER_ROLES:
                yield f"{prefix}layers.{i}.{role}", layer[role]

    def check_shapes(self) -> None:
        cfg = self.config
        if len(self.layers) != cfg.depth:
            raise DimensionError(f"{cfg.kind} tower has {len(self.layers)} layers, config says {cfg.depth}")
        for name, shape in global_shapes(cfg).items():
            if name not in self.globals or self.globals[name].shape != shape:
                got = self.globals[name].shape if name in self.globals else None
                raise DimensionError(f"{cfg.kind}.{name}: expected {shape}, got {got}")
        expected = layer_shapes(cfg)
        for i, layer in enumerate(self.layers):
            for role, shape in expected.items():
                if role not in layer or layer[role].shape != shape:
                    got = layer[role].shape if role in layer else None
                    raise DimensionError(f"{cfg.kind}.layers.{i}.{role}: expected {shape}, got {got}")


@dataclass
class ClipModel:
    image: EncoderWeights
    text: EncoderWeights
    log_logit_scale: Tensor = field(default_factory=lambda: Tensor(math.log(DEFAULT_LOGIT_SCALE)))

    def named_parameters(self):
        yield from self.image.named_parameters("image.")
        yield from self.text.named_parameters("text.")
        yield "logit_scale", self.log_logit_scale

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def requires_grad_(self, flag: bool = True) -> "ClipModel":
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None
        return self

    def logit_scale(self) -> Tensor:
        return ops.exp(ops.minimum(self.log_logit_scale, math.log(MAX_LOGIT_SCALE)))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def clone(self, requires_grad: bool = False) -> "ClipModel":
        return model_from_state(self.image.config, self.text.config, self.state_dict(), requires_grad)


def _init_tower(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderWeights:
    d, f = cfg.width, cfg.hidden
    attn_std = d ** -0.5
    proj_std = attn_std * (2 * cfg.depth) ** -0.5
    fc_std = (2 * d) ** -0.5
    g: dict[str, np.ndarray] = {}
    if cfg.kind == "text":
        g["tok_emb"] = rng.normal(0.0, 0.02, (cfg.vocab_size, d))
    else:
        g["patch_w"] = rng.normal(0.0, cfg.patch_dim ** -0.5, (d, cfg.patch_dim))
        g["patch_b"] = np.zeros(d)
        g["cls"] = rng.normal(0.0, attn_std, d)
    g["pos"] = rng.normal(0.0, 0.01, (cfg.n_positions, d))
    g["lnf_g"] = np.ones(d)
    g["lnf_b"] = np.zeros(d)
    g["proj"] = rng.normal(0.0, attn_std, (cfg.embed_dim, d))
    layers = []
    for _ in range(cfg.depth):
        layer = {}
        layer["ln1_g"], layer["ln1_b"] = np.ones(d), np.zeros(d)
        for role in ("q", "k", "v"):
            layer[f"{role}_w"] = rng.normal(0.0, attn_std, (d, d))
            layer[f"{role}_b"] = np.zeros(d)
        layer["o_w"] = rng.normal(0.0, proj_std, (d, d))
        layer["o_b"] = np.zeros(d)
        layer["ln2_g"], layer["ln2_b"] = np.ones(d), np.zeros(d)
        layer["fc1_w"] = rng.normal(0.0, fc_std, (f, d))
        layer["fc1_b"] = np.zeros(f)
        layer["fc2_w"] = rng.normal(0.0, proj_std, (d, f))
        layer["fc2_b"] = np.zeros(d)
        layers.append({k: Tensor(layer[k]) for k in LAYER_ROLES})
    return EncoderWeights(cfg, {k: Tensor(v) for k, v in g.items()}, layers)


def init_clip_model(image_cfg: EncoderConfig, text_cfg: EncoderConfig, seed: int,
                    requires_grad: bool = False) -> ClipModel:
    """Seeded random initialisation (``model`` sub-stream) of both towers."""
    if image_cfg.embed_dim != text_cfg.embed_dim:
        raise DimensionError("image and text towers must share embed_dim")
    model = ClipModel(
        image=_init_tower(image_cfg, substream(seed, "model", 0)),
        text=_init_tower(text_cfg, substream(seed, "model", 1)),
    )
    return model.requires_grad_(requires_grad)


def model_from_state(image_cfg: EncoderConfig, text_cfg: EncoderConfig, state: dict[str, np.ndarray],
                     requires_grad: bool = False) -> ClipModel:
    """Rebuild a model from ``named_parameters`` arrays, validating every shape."""
    towers = {}
    for prefix, cfg in (("image", image_cfg), ("text", text_cfg)):
        try:
            g = {name: Tensor(np.array(state[f"{prefix}.{name}"])) for name in global_shapes(cfg)}
            layers = [
                {role: Tensor(np.array(state[f"{prefix}.layers.{i}.{role}"])) for role in LAYER_ROLES}
                for i in range(cfg.depth)
            ]
        except KeyError as exc:
            raise DimensionError(f"missing tensor {exc.args[0]} for {prefix} tower") from None
        towers[prefix] = EncoderWeights(cfg, g, layers)
        towers[prefix].check_shapes()
    if "logit_scale" not in state:
        raise DimensionError("missing tensor logit_scale")
    model = ClipModel(towers["image"], towers["text"], Tensor(np.array(state["logit_scale"])))
    return model.requires_grad_(requires_grad)


# -- forward -----------------------------------------------------------------

def _block(x: Tensor, p: dict[str, Tensor], heads: int, key_mask: np.ndarray | None) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    h = ops.layer_norm(x, p["ln1_g"], p["ln1_b"], LN_EPS)

    def split(z):
        return ops.transpose(ops.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(ops.linear(h, p["q_w"], p["q_b"]))
    k = split(ops.linear(h, p["k_w"], p["k_b"]))
    v = split(ops.linear(h, p["v_w"], p["v_b"]))
    scores = ops.matmul(q, ops.swap_last(k)) * (1.0 / math.sqrt(dh))
    attn = ops.softmax(scores, axis=-1, mask=key_mask)
    ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    x = x + ops.linear(ctx, p["o_w"], p["o_b"])
    h = ops.layer_norm(x, p["ln2_g"], p["ln2_b"], LN_EPS)
    f = ops.linear(ops.gelu(ops.linear(h, p["fc1_w"], p["fc1_b"])), p["fc2_w"], p["fc2_b"])
    return x + f


def _head(x: Tensor, w: EncoderWeights, pool_index) -> Tensor:
    x = ops.layer_norm(x, w.globals["lnf_g"], w.globals["lnf_b"], LN_EPS)
    pooled = x[pool_index]
    return ops.l2_normalize(ops.linear(pooled, w.globals["proj"]))


def eos_positions(tokens: np.ndarray) -> np.ndarray:
    """Index of the first EOS per row (last non-pad token when no EOS is present)."""
    is_eos = tokens == EOS_ID
    has_eos = is_eos.any(axis=1)
    first = is_eos.argmax(axis=1)
    nonpad = tokens != PAD_ID
    if not np.all(has_eos | nonpad.any(axis=1)):
        raise InputError("a token sequence contains only padding")
    last_nonpad = tokens.shape[1] - 1 - nonpad[:, ::-1].argmax(axis=1)
    return np.where(has_eos, first, last_nonpad)


def encode_text(weights: EncoderWeights, tokens) -> Tensor:
    """Embed token sequences to unit vectors [B x E] (EOS pooling, keys beyond EOS masked)."""
    cfg = weights.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] > cfg.seq_len or tokens.shape[1] < 1:
        raise InputError(f"tokens must be [B x <= {cfg.seq_len}], got {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    eos = eos_positions(tokens)
    # keys after EOS are masked and only EOS is pooled, so trailing columns never matter
    tokens = tokens[:, :int(eos.max()) + 1]
    b, t = tokens.shape
    key_mask = (np.arange(t)[None, :] <= eos[:, None])[:, None, None, :]
    pos = weights.globals["pos"] if t == cfg.seq_len else weights.globals["pos"][:t]
    x = ops.embedding(weights.globals["tok_emb"], tokens) + pos
    for layer in weights.layers:
        x = _block(x, layer, cfg.heads, key_mask)
    return _head(x, weights, (np.arange(b), eos))


def encode_image(weights: EncoderWeights, images) -> Tensor:
    """Embed image batches [B x g x g x p*p*c] to unit vectors [B x E] (CLS pooling)."""
    cfg = weights.config
    images = np.asarray(images)
    n = cfg.grid * cfg.grid
    if images.ndim == 4 and images.shape[1:] == (cfg.grid, cfg.grid, cfg.patch_dim):
        images = images.reshape(images.shape[0], n, cfg.patch_dim)
    elif not (images.ndim == 3 and images.shape[1:] == (n, cfg.patch_dim)):
        raise InputError(
            f"images must be [B x {cfg.grid} x {cfg.grid} x {cfg.patch_dim}], got {images.shape}")
    b = images.shape[0]
    patches = ops.linear(Tensor(images), weights.globals["patch_w"], weights.globals["patch_b"])
    cls = ops.broadcast_to(ops.reshape(weights.globals["cls"], (1, 1, cfg.width)), (b, 1, cfg.width))
    x = ops.concat([cls, patches], axis=1) + weights.globals["pos"]
    for layer in weights.layers:
        x = _block(x, layer, cfg.heads, None)
    return _head(x, weights, (slice(None), 0))


def clip_logits(img_emb, txt_emb, scale) -> tuple[Tensor, Tensor]:
    """Scaled similarity: image-to-text logits and their transpose."""
    scale_value = scale.data if isinstance(scale, Tensor) else scale
    if not np.all(np.asarray(scale_value) > 0):
        raise ContractError(f"logit scale must be positive, got {scale_value}")
    img_emb, txt_emb = ops._t(img_emb), ops._t(txt_emb)
    if img_emb.shape != txt_emb.shape:
        raise DimensionError(f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}")
    i2t = ops.matmul(img_emb, ops.transpose(txt_emb)) * scale
    return i2t, ops.transpose(i2t)


def forward_logits(model: ClipModel, images, tokens) -> tuple[Tensor, Tensor]:
    img = encode_image(model.image, images)
    txt = encode_text(model.text, tokens)
    return clip_logits(img, txt, model.logit_scale())


def count_params(model: ClipModel) -> dict[str, int]:
    """Learnable scalar counts: per tower, the logit scale, and the total."""
    img = int(np.sum([t.size for _, t in model.image.named_parameters()]))
    txt = int(np.sum([t.size for _, t in model.text.named_parameters()]))
    scale = int(model.log_logit_scale.size)
    return {"image": img, "text": txt, "logit_scale": scale, "total": img + txt + scale}
