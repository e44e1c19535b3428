"""Flat ``key = value`` run configuration.

One pair per line, ``#`` starts a comment, keys are namespaced
(``model.width``, ``compress.d2``, ``train.map.steps``, ``loss.lambda``).
Every key has a default; unknown keys and unparsable values raise
:class:`~clipmap.errors.ConfigError` naming the key.
"""

from __future__ import annotations

from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError, ContractError
from .losses import LossWeights
from .mapping import INIT_METHODS, CompressionSpec, TowerSpec
from .model import EncoderConfig
from .training import StageConfig

# key -> (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "run.seed": (0, "seed for the model, maps and shuffle streams (--seed overrides it)"),
    "data.seed": (0, "seed for the synthetic dataset; kept apart so runs can share one dataset"),
    "model.width": (64, "teacher hidden width D1"),
    "model.depth": (8, "teacher layer count L1"),
    "model.heads": (4, "attention heads (kept fixed under compression)"),
    "model.embed_dim": (32, "shared output embedding size E"),
    "model.ffn_mult": (4, "feed-forward expansion factor"),
    "model.vocab": (64, "text vocabulary size"),
    "model.seq_len": (16, "maximum caption length"),
    "model.grid": (4, "image patch grid side g"),
    "model.patch": (2, "patch side in pixels p"),
    "model.channels": (3, "image channels c"),
    "compress.d2": (32, "student width D2"),
    "compress.l2": (4, "student depth L2"),
    "compress.init": ("diag", "map initialiser: diag, random, fan_in, fan_avg"),
    "compress.off_diag_std": (0.0, "std of off-diagonal entries under diag init"),
    "data.attributes": (6, "latent attributes K"),
    "data.values": (4, "values per attribute V"),
    "data.noise": (0.1, "pixel noise std"),
    "data.train_size": (16384, "training pairs"),
    "data.val_size": (256, "held-out pairs"),
    "train.teacher.steps": (2000, "teacher pretraining steps"),
    "train.teacher.lr": (1e-3, "teacher base learning rate"),
    "train.teacher.warmup": (200, "teacher warmup steps"),
    "train.teacher.batch": (64, "teacher batch size"),
    "train.teacher.weight_decay": (0.2, "teacher decoupled weight decay"),
    "train.map.steps": (500, "mapping-stage steps"),
    "train.map.lr": (1e-3, "mapping-stage base learning rate"),
    "train.map.warmup": (50, "mapping-stage warmup steps"),
    "train.map.batch": (64, "mapping-stage batch size"),
    "train.map.weight_decay": (0.2, "mapping-stage decoupled weight decay"),
    "train.map.distill": (False, "add the distillation term during the mapping stage"),
    "train.retrain.steps": (2000, "retraining-stage steps"),
    "train.retrain.lr": (3e-4, "retraining-stage base learning rate"),
    "train.retrain.warmup": (200, "retraining-stage warmup steps"),
    "train.retrain.batch": (64, "retraining-stage batch size"),
    "train.retrain.weight_decay": (0.2, "retraining-stage decoupled weight decay"),
    "train.beta1": (0.9, "AdamW beta1"),
    "train.beta2": (0.98, "AdamW beta2"),
    "train.eps": (1e-8, "AdamW epsilon"),
    "train.clip_norm": (5.0, "global gradient-norm clip"),
    "loss.lambda": (1.0, "distillation weight in (1 - lambda) * task + lambda * soft"),
    "eval.attribute": (0, "attribute used for zero-shot accuracy"),
}

STAGE_PREFIX = {"pretrain": "teacher", "mapping": "map", "retraining": "retrain"}


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}", key=key) from None


class RunConfig:
    def __init__(self, overrides: dict | None = None):
        self.values = {k: v for k, (v, _) in DEFAULTS.items()}
        self.explicit: set[str] = set()
        for key, value in (overrides or {}).items():
            self.set(key, value)
        self.validate()

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        overrides: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in overrides:
                raise ConfigError(f"{key}: set twice", key=key)
            overrides[key] = value
        return cls(overrides)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        default = DEFAULTS[key][0]
        self.values[key] = _coerce(key, value, default) if isinstance(value, str) else value
        self.explicit.add(key)

    def __getitem__(self, key: str):
        return self.values[key]

    def dump(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in DEFAULTS) + "\n"

    def validate(self) -> None:
        v = self.values
        checks = [
            ("model.heads", v["model.width"] % max(v["model.heads"], 1) == 0, "model.width must be divisible by it"),
            ("compress.d2", 1 <= v["compress.d2"] <= v["model.width"], "must lie in [1, model.width]"),
            ("compress.d2", v["compress.d2"] % max(v["model.heads"], 1) == 0, "must be divisible by model.heads"),
            ("compress.l2", 1 <= v["compress.l2"] <= v["model.depth"], "must lie in [1, model.depth]"),
            ("compress.init", v["compress.init"] in INIT_METHODS, f"must be one of {INIT_METHODS}"),
            ("compress.off_diag_std", v["compress.off_diag_std"] >= 0, "must be >= 0"),
            ("loss.lambda", 0.0 <= v["loss.lambda"] <= 1.0, "must lie in [0, 1]"),
            ("train.clip_norm", v["train.clip_norm"] > 0, "must be positive"),
            ("data.values", v["data.values"] >= 2, "must be >= 2"),
            ("data.values", 4 + v["data.values"] * v["data.attributes"] <= v["model.vocab"],
             "data.attributes * data.values + 4 must fit in model.vocab"),
        ]
        for key in DEFAULTS:
            if key.startswith("model.") and v[key] < 1:
                checks.append((key, False, "must be >= 1"))
        for prefix in STAGE_PREFIX.values():
            steps, warmup = v[f"train.{prefix}.steps"], v[f"train.{prefix}.warmup"]
            checks.append((f"train.{prefix}.steps", steps >= 0, "must be >= 0"))
            checks.append((f"train.{prefix}.warmup", steps == 0 or 0 <= warmup < steps,
                           f"must be smaller than train.{prefix}.steps"))
            checks.append((f"train.{prefix}.batch", v[f"train.{prefix}.batch"] >= 1, "must be >= 1"))
        for key, ok, why in checks:
            if not ok:
                raise ConfigError(f"{key} = {v[key]}: {why}", key=key)
        try:
            self.image_config()
            self.text_config()
            self.synthetic_spec()
            self.compression_spec()
            self.loss_weights()
            for stage in STAGE_PREFIX:
                self.stage_config(stage)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    # -- typed views ---------------------------------------------------------
    def _encoder(self, kind: str) -> EncoderConfig:
        return EncoderConfig(
            kind=kind, width=self["model.width"], depth=self["model.depth"], heads=self["model.heads"],
            embed_dim=self["model.embed_dim"], ffn_mult=self["model.ffn_mult"], vocab_size=self["model.vocab"],
            seq_len=self["model.seq_len"], grid=self["model.grid"], patch=self["model.patch"],
            channels=self["model.channels"],
        )

    def image_config(self) -> EncoderConfig:
        return self._encoder("image")

    def text_config(self) -> EncoderConfig:
        return self._encoder("text")

    def student_configs(self) -> tuple[EncoderConfig, EncoderConfig]:
        d2, l2 = self["compress.d2"], self["compress.l2"]
        return self.image_config().resized(d2, l2), self.text_config().resized(d2, l2)

    def compression_spec(self) -> CompressionSpec:
        ts = TowerSpec(self["model.width"], self["compress.d2"], self["model.depth"], self["compress.l2"])
        ts.validate(self["model.heads"])
        return CompressionSpec(ts, ts)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_attributes=self["data.attributes"], n_values=self["data.values"], grid=self["model.grid"],
            patch=self["model.patch"], channels=self["model.channels"], noise=self["data.noise"],
            seed=self["data.seed"], n_train=self["data.train_size"], n_val=self["data.val_size"],
            seq_len=self["model.seq_len"], vocab_size=self["model.vocab"],
        )

    def stage_config(self, stage: str) -> StageConfig:
        p = f"train.{STAGE_PREFIX[stage]}"
        return StageConfig(
            stage=stage, steps=self[f"{p}.steps"], batch_size=self[f"{p}.batch"], lr=self[f"{p}.lr"],
            weight_decay=self[f"{p}.weight_decay"], beta1=self["train.beta1"], beta2=self["train.beta2"],
            eps=self["train.eps"], warmup=self[f"{p}.warmup"], clip_norm=self["train.clip_norm"],
            seed=self["run.seed"], distill=bool(stage == "mapping" and self["train.map.distill"]),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self["loss.lambda"])
