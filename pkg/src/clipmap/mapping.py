"""Width/depth compression of a dual encoder through learnable linear maps.

A weight block ``W`` of shape [d_out1 x d_in1] is compressed to
[d_out2 x d_in2] by two factor matrices, ``F_out @ W @ F_in.T``; this is the
Kronecker map ``(F_in kron F_out) vec(W)`` (column-stacking vec) without ever
forming the [d_out2*d_in2 x d_out1*d_in1] matrix.  Depth is reduced by mixing
the per-layer blocks with an [L2 x L1] matrix.

Sharing scheme per tower: one residual-stream map ``f_emb_out`` is the input
map of Q/K/V/fc1, the output map of O/fc2, and maps every embedding, bias
and layer-norm vector living in the residual stream.  Per source layer there
are three more maps: ``qk_out`` (output of Q and K, tied), ``v_out`` (output
of V, input of O) and ``fc1_out`` (output of fc1, input of fc2).  One depth
matrix per tower mixes every per-layer tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor, no_grad
from .errors import ContractError, DimensionError
from .model import (
    LAYER_ROLES,
    ClipModel,
    EncoderConfig,
    EncoderWeights,
)
from .rng import substream

INIT_METHODS = ("random", "fan_in", "fan_avg", "diag")
ORACLE_MAX_DIM = 16
LAYER_MAP_NAMES = ("qk_out", "v_out", "fc1_out")


@dataclass(frozen=True)
class TowerSpec:
    d1: int
    d2: int
    l1: int
    l2: int

    def validate(self, heads: int | None = None) -> None:
        if min(self.d1, self.d2, self.l1, self.l2) < 1:
            raise ContractError(f"compression sizes must be positive: {self}")
        if self.d2 > self.d1 or self.l2 > self.l1:
            raise ContractError(f"compression cannot grow the model: {self}")
        if heads is not None and self.d2 % heads:
            raise ContractError(f"target width {self.d2} is not divisible by {heads} heads")


@dataclass(frozen=True)
class CompressionSpec:
    image: TowerSpec
    text: TowerSpec

    @classmethod
    def uniform(cls, d1: int, d2: int, l1: int, l2: int) -> "CompressionSpec":
        t = TowerSpec(d1, d2, l1, l2)
        return cls(t, t)

    def tower(self, kind: str) -> TowerSpec:
        return self.image if kind == "image" else self.text


@dataclass
class TowerMaps:
    """Learnable compression parameters of one tower.

    ``f_emb_out`` [D2 x D1] and the per-source-layer dicts in ``layers`` are the
    width maps; ``depth`` [L2 x L1] is the depth-mixing matrix.
    """

    f_emb_out: Tensor
    layers: list[dict[str, Tensor]]
    depth: Tensor

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}f_emb_out", self.f_emb_out
        for i, layer in enumerate(self.layers):
            for name in LAYER_MAP_NAMES:
                yield f"{prefix}layers.{i}.{name}", layer[name]
        yield f"{prefix}depth", self.depth


@dataclass
class CompressionMaps:
    image: TowerMaps
    text: TowerMaps

    def named_parameters(self):
        yield from self.image.named_parameters("image.")
        yield from self.text.named_parameters("text.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def requires_grad_(self, flag: bool = True) -> "CompressionMaps":
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None
        return self

    def clone(self) -> "CompressionMaps":
        return maps_from_state(self.state_dict(), requires_grad=self.image.f_emb_out.requires_grad)


def maps_from_state(state: dict[str, np.ndarray], requires_grad: bool = False) -> CompressionMaps:
    towers = {}
    for prefix in ("image", "text"):
        n_layers = 0
        while f"{prefix}.layers.{n_layers}.qk_out" in state:
            n_layers += 1
        try:
            towers[prefix] = TowerMaps(
                f_emb_out=Tensor(np.array(state[f"{prefix}.f_emb_out"]), requires_grad),
                layers=[
                    {n: Tensor(np.array(state[f"{prefix}.layers.{i}.{n}"]), requires_grad) for n in LAYER_MAP_NAMES}
                    for i in range(n_layers)
                ],
                depth=Tensor(np.array(state[f"{prefix}.depth"]), requires_grad),
            )
        except KeyError as exc:
            raise DimensionError(f"missing map tensor {exc.args[0]}") from None
    return CompressionMaps(towers["image"], towers["text"])


# -- Kronecker maps ------------------------------------------------------------

def kron_map_apply(w, f_out, f_in) -> Tensor:
    """Map ``w`` [d_out1 x d_in1] to ``f_out @ w @ f_in.T`` [d_out2 x d_in2]."""
    w, f_out, f_in = ops._t(w), ops._t(f_out), ops._t(f_in)
    if w.ndim != 2 or f_out.ndim != 2 or f_in.ndim != 2:
        raise DimensionError(f"kron_map_apply needs matrices, got {w.shape}, {f_out.shape}, {f_in.shape}")
    if f_out.shape[1] != w.shape[0] or f_in.shape[1] != w.shape[1]:
        raise DimensionError(
            f"maps {f_out.shape} (out) and {f_in.shape} (in) do not conform to block {w.shape}")
    return ops.matmul(ops.matmul(f_out, w), ops.transpose(f_in))


def map_vector(f_out, v) -> Tensor:
    """Map a vector living in a block's output space: ``f_out @ v``."""
    f_out, v = ops._t(f_out), ops._t(v)
    if v.ndim != 1 or f_out.shape[1] != v.shape[0]:
        raise DimensionError(f"map {f_out.shape} does not conform to vector {v.shape}")
    return ops.reshape(ops.matmul(f_out, ops.reshape(v, (v.shape[0], 1))), (f_out.shape[0],))


def explicit_kron_oracle(f_in, f_out, w) -> np.ndarray:
    """Reference: materialise ``R = f_in kron f_out`` and apply it to column-stacked ``vec(w)``."""
    f_in, f_out, w = (np.asarray(getattr(a, "data", a), dtype=np.float64) for a in (f_in, f_out, w))
    dims = f_in.shape + f_out.shape + w.shape
    if max(dims) > ORACLE_MAX_DIM:
        raise ContractError(f"refusing to materialise a Kronecker map with a dimension above {ORACLE_MAX_DIM}: {dims}")
    if f_out.shape[1] != w.shape[0] or f_in.shape[1] != w.shape[1]:
        raise DimensionError(f"maps {f_out.shape} (out) and {f_in.shape} (in) do not conform to block {w.shape}")
    r = np.kron(f_in, f_out)
    vec_w = w.reshape(-1, order="F")
    return (r @ vec_w).reshape((f_out.shape[0], f_in.shape[0]), order="F")


# -- initialisers ----------------------------------------------------------------

def diag_inherit_init(rows: int, cols: int, off_diag_std: float = 0.0,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Wide selector: ones on the main diagonal, N(0, std^2) (or exact zeros) elsewhere."""
    if rows > cols:
        raise ContractError(f"compression maps must be wide (rows <= cols), got {rows}x{cols}")
    if off_diag_std < 0:
        raise ContractError("off_diag_std must be >= 0")
    if off_diag_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        m = rng.normal(0.0, off_diag_std, (rows, cols))
    else:
        m = np.zeros((rows, cols))
    m[np.arange(rows), np.arange(rows)] = 1.0
    return m


def depth_selector_init(l2: int, l1: int) -> np.ndarray:
    """Row r selects source layer ``floor((r+1)*l1/l2 + 0.5) - 1``: evenly spaced, last layer kept."""
    if l2 > l1 or l2 < 1:
        raise ContractError(f"depth selector needs 1 <= l2 <= l1, got {l2}, {l1}")
    m = np.zeros((l2, l1))
    for r in range(l2):
        m[r, int(math.floor((r + 1) * l1 / l2 + 0.5)) - 1] = 1.0
    return m


def init_factor(rows: int, cols: int, method: str, rng: np.random.Generator, off_diag_std: float = 0.0) -> np.ndarray:
    """One [rows x cols] factor. Fan-based schemes use fan_in=cols, fan_out=rows."""
    if method == "diag":
        return diag_inherit_init(rows, cols, off_diag_std, rng)
    if method == "random":
        std = 0.02
    elif method == "fan_in":
        std = math.sqrt(2.0 / cols)
    elif method == "fan_avg":
        std = math.sqrt(2.0 / (cols + rows))
    else:
        raise ContractError(f"unknown init method {method!r}; choose from {INIT_METHODS}")
    return rng.normal(0.0, std, (rows, cols))


def init_maps(spec: CompressionSpec, image_cfg: EncoderConfig, text_cfg: EncoderConfig,
              method: str = "diag", seed: int = 0, off_diag_std: float = 0.0,
              requires_grad: bool = True) -> CompressionMaps:
    """Build width maps with ``method`` and evenly spaced depth selectors for both towers."""
    towers = {}
    for idx, cfg in enumerate((image_cfg, text_cfg)):
        ts = spec.tower(cfg.kind)
        ts.validate(cfg.heads)
        if ts.d1 != cfg.width or ts.l1 != cfg.depth:
            raise DimensionError(
                f"{cfg.kind} source dims ({ts.d1}, {ts.l1}) do not match teacher ({cfg.width}, {cfg.depth})")
        rng = substream(seed, "maps", idx)
        m = cfg.ffn_mult

        def factor(rows, cols):
            return Tensor(init_factor(rows, cols, method, rng, off_diag_std), requires_grad)

        f_emb = factor(ts.d2, ts.d1)
        layers = [
            {"qk_out": factor(ts.d2, ts.d1), "v_out": factor(ts.d2, ts.d1), "fc1_out": factor(m * ts.d2, m * ts.d1)}
            for _ in range(ts.l1)
        ]
        towers[cfg.kind] = TowerMaps(f_emb, layers, Tensor(depth_selector_init(ts.l2, ts.l1), requires_grad))
    return CompressionMaps(towers["image"], towers["text"])


# -- depth -------------------------------------------------------------------------

def depth_combine(blocks, l_depth) -> list[Tensor]:
    """New block r = sum_l l_depth[r, l] * blocks[l] (elementwise)."""
    blocks = [ops._t(b) for b in blocks]
    l_depth = ops._t(l_depth)
    shapes = {b.shape for b in blocks}
    if len(shapes) != 1:
        raise DimensionError(f"depth_combine needs same-shape blocks, got {sorted(shapes)}")
    if l_depth.ndim != 2 or l_depth.shape[1] != len(blocks):
        raise DimensionError(f"depth matrix {l_depth.shape} does not match {len(blocks)} source blocks")
    shape = blocks[0].shape
    flat = ops.reshape(ops.stack(blocks, axis=0), (len(blocks), -1))
    mixed = ops.matmul(l_depth, flat)
    return [ops.reshape(mixed[r], shape) for r in range(l_depth.shape[0])]


# -- student construction ----------------------------------------------------------

def _map_layer(layer: dict[str, Tensor], f_emb: Tensor, lm: dict[str, Tensor]) -> dict[str, Tensor]:
    qk, v, fc1 = lm["qk_out"], lm["v_out"], lm["fc1_out"]
    return {
        "ln1_g": map_vector(f_emb, layer["ln1_g"]),
        "ln1_b": map_vector(f_emb, layer["ln1_b"]),
        "q_w": kron_map_apply(layer["q_w"], qk, f_emb),
        "q_b": map_vector(qk, layer["q_b"]),
        "k_w": kron_map_apply(layer["k_w"], qk, f_emb),
        "k_b": map_vector(qk, layer["k_b"]),
        "v_w": kron_map_apply(layer["v_w"], v, f_emb),
        "v_b": map_vector(v, layer["v_b"]),
        "o_w": kron_map_apply(layer["o_w"], f_emb, v),
        "o_b": map_vector(f_emb, layer["o_b"]),
        "ln2_g": map_vector(f_emb, layer["ln2_g"]),
        "ln2_b": map_vector(f_emb, layer["ln2_b"]),
        "fc1_w": kron_map_apply(layer["fc1_w"], fc1, f_emb),
        "fc1_b": map_vector(fc1, layer["fc1_b"]),
        "fc2_w": kron_map_apply(layer["fc2_w"], f_emb, fc1),
        "fc2_b": map_vector(f_emb, layer["fc2_b"]),
    }


def _map_globals(g: dict[str, Tensor], f_emb: Tensor, kind: str) -> dict[str, Tensor]:
    out = {}
    if kind == "text":
        out["tok_emb"] = ops.matmul(g["tok_emb"], ops.transpose(f_emb))
    else:
        out["patch_w"] = ops.matmul(f_emb, g["patch_w"])
        out["patch_b"] = map_vector(f_emb, g["patch_b"])
        out["cls"] = map_vector(f_emb, g["cls"])
    out["pos"] = ops.matmul(g["pos"], ops.transpose(f_emb))
    out["lnf_g"] = map_vector(f_emb, g["lnf_g"])
    out["lnf_b"] = map_vector(f_emb, g["lnf_b"])
    out["proj"] = ops.matmul(g["proj"], ops.transpose(f_emb))
    return out


def _check_tower_maps(tm: TowerMaps, ts: TowerSpec, cfg: EncoderConfig) -> None:
    m = cfg.ffn_mult
    if tm.f_emb_out.shape != (ts.d2, ts.d1):
        raise DimensionError(f"{cfg.kind}.f_emb_out is {tm.f_emb_out.shape}, spec needs {(ts.d2, ts.d1)}")
    if len(tm.layers) != ts.l1:
        raise DimensionError(f"{cfg.kind} has width maps for {len(tm.layers)} layers, spec needs {ts.l1}")
    want = {"qk_out": (ts.d2, ts.d1), "v_out": (ts.d2, ts.d1), "fc1_out": (m * ts.d2, m * ts.d1)}
    for i, lm in enumerate(tm.layers):
        for name, shape in want.items():
            if lm[name].shape != shape:
                raise DimensionError(f"{cfg.kind}.layers.{i}.{name} is {lm[name].shape}, spec needs {shape}")
    if tm.depth.shape != (ts.l2, ts.l1):
        raise DimensionError(f"{cfg.kind}.depth is {tm.depth.shape}, spec needs {(ts.l2, ts.l1)}")


def build_tower(teacher: EncoderWeights, tm: TowerMaps, ts: TowerSpec) -> EncoderWeights:
    cfg = teacher.config
    ts.validate(cfg.heads)
    if ts.d1 != cfg.width or ts.l1 != cfg.depth:
        raise DimensionError(
            f"{cfg.kind} source dims ({ts.d1}, {ts.l1}) do not match teacher ({cfg.width}, {cfg.depth})")
    _check_tower_maps(tm, ts, cfg)
    f_emb = tm.f_emb_out
    # width first, then depth
    mapped = [_map_layer(layer, f_emb, lm) for layer, lm in zip(teacher.layers, tm.layers)]
    new_layers: list[dict[str, Tensor]] = [{} for _ in range(ts.l2)]
    for role in LAYER_ROLES:
        for r, t in enumerate(depth_combine([m[role] for m in mapped], tm.depth)):
            new_layers[r][role] = t
    out = EncoderWeights(cfg.resized(ts.d2, ts.l2), _map_globals(teacher.globals, f_emb, cfg.kind), new_layers)
    out.check_shapes()
    return out


def build_student(teacher: ClipModel, maps: CompressionMaps, spec: CompressionSpec) -> ClipModel:
    """Compressed student from a frozen teacher; differentiable w.r.t. the maps.

    Teacher tensors are only read. The logit scale is copied as a new tensor.
    """
    return ClipModel(
        image=build_tower(teacher.image, maps.image, spec.image),
        text=build_tower(teacher.text, maps.text, spec.text),
        log_logit_scale=Tensor(np.array(teacher.log_logit_scale.data)),
    )


def materialize_student(teacher: ClipModel, maps: CompressionMaps, spec: CompressionSpec,
                        requires_grad: bool = False) -> ClipModel:
    """Build the student outside any graph and return it as fresh leaf tensors."""
    with no_grad():
        student = build_student(teacher, maps, spec)
    return student.clone(requires_grad=requires_grad)


# -- accounting & variance analysis -------------------------------------------------

def full_mapping_entries(d1: int, d2: int) -> int:
    """Entries of one unfactored map R in R^{D2^2 x D1^2}."""
    return d1 * d1 * d2 * d2


def factored_mapping_entries(d1: int, d2: int) -> int:
    """Entries of one factor pair F_in, F_out in R^{D2 x D1}."""
    return 2 * d1 * d2


def mapping_param_count(spec: CompressionSpec, ffn_mult: int = 4) -> int:
    """Learnable mapping scalars under the sharing scheme, summed over both towers."""
    total = 0
    for ts in (spec.image, spec.text):
        per_layer = 2 * ts.d2 * ts.d1 + (ffn_mult * ts.d2) * (ffn_mult * ts.d1)
        total += ts.d2 * ts.d1 + ts.l1 * per_layer + ts.l2 * ts.l1
    return total


@dataclass(frozen=True)
class VarianceProbe:
    sigma_a: float
    sigma_b: float
    dims: tuple[int, int]
    n_samples: int
    n_pairs: int
    mean: float
    variance: float

    @property
    def expected_variance(self) -> float:
        return self.sigma_a ** 2 * self.sigma_b ** 2

    @property
    def standard_error(self) -> float:
        return self.sigma_a * self.sigma_b / math.sqrt(self.n_samples)


def variance_probe(sigma_a: float, sigma_b: float, dims: tuple[int, int] = (2, 4),
                   n_samples: int = 1_000_000, seed: int = 0) -> VarianceProbe:
    """Monte-Carlo moments of the entries of A kron B for i.i.d. zero-mean Gaussian factors.

    A and B are [rows x cols] (``dims``); independent pairs are drawn until at
    least ``n_samples`` product entries exist.  Small factors keep the draws
    close to independent, so the moment estimates converge quickly.
    """
    if n_samples < 100_000:
        raise ContractError("variance_probe needs n_samples >= 1e5")
    rows, cols = dims
    per_pair = (rows * cols) ** 2
    n_pairs = -(-n_samples // per_pair)
    rng = substream(seed, "maps", 99)
    a = rng.normal(0.0, 1.0, (n_pairs, rows, cols)) * sigma_a
    b = rng.normal(0.0, 1.0, (n_pairs, rows, cols)) * sigma_b
    # (A kron B)[i*rows + k, j*cols + l] = A[i, j] * B[k, l]
    r = np.einsum("pij,pkl->pikjl", a, b).reshape(-1)
    return VarianceProbe(
        sigma_a=sigma_a, sigma_b=sigma_b, dims=(rows, cols), n_samples=int(r.size), n_pairs=n_pairs,
        mean=float(r.mean()), variance=float(r.var()),
    )
