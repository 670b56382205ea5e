"""Versioned experiment configuration.

One JSON file describes a full run: scene distribution, model architecture,
training schedule, and evaluation protocol. Every field has a default, so an
empty object ``{}`` is a valid config (the seeded desk-scale benchmark).
Unknown keys are rejected with the offending dotted path, and the fingerprint
is a stable hash of the canonicalized content, so key order in the file never
matters.

The fingerprint intentionally covers only what shapes the trained artifact:
scene, model, and training sections (minus the step count, so a run can be
extended in place). Evaluation knobs, the sharing mode, and the output
directory can change without orphaning a checkpoint.
"""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .scene import SceneConfig

CONFIG_VERSION = 1

SHARE_MODES = ("instance", "fullmap")


class ConfigError(ValueError):
    """Invalid config content; the message names the dotted field path."""


@dataclass
class TrainConfig:
    steps: int = 600
    lr: float = 2.5e-3
    batch: int = 2
    seed: int = 0
    noise_sigma: float = 0.2     # collaborator pose noise augmentation, m std
    n_scenes: int = 200
    scene_seed0: int = 1000
    checkpoint_every: int = 50

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch < 1 or self.n_scenes < 1:
            raise ValueError("batch and n_scenes must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


@dataclass
class EvalConfig:
    n_scenes: int = 50
    scene_seed0: int = 900000
    eval_seed: int = 0
    noise_sigma: float = 0.0
    det_thre: float | None = None   # late-fusion send threshold; None = c_thre

    def validate(self) -> None:
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.det_thre is not None and not (0.0 <= self.det_thre <= 1.0):
            raise ValueError("det_thre must be in [0, 1] or null")


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    share_mode: str = "instance"    # instance | fullmap
    out_dir: str = "runs/default"

    def validate(self) -> None:
        for name in ("scene", "model", "train", "eval"):
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from None
        if self.share_mode not in SHARE_MODES:
            raise ConfigError(
                f'share_mode: must be one of {SHARE_MODES}, got "{self.share_mode}"')
        if self.model.feat_c != self.scene.feat_c:
            raise ConfigError(
                f"model.feat_c ({self.model.feat_c}) must match "
                f"scene.feat_c ({self.scene.feat_c})")
        lo_t, hi_t = self.train.scene_seed0, self.train.scene_seed0 + self.train.n_scenes
        lo_e, hi_e = self.eval.scene_seed0, self.eval.scene_seed0 + self.eval.n_scenes
        if lo_t < hi_e and lo_e < hi_t:
            raise ConfigError(
                "train.scene_seed0/eval.scene_seed0: train and eval scene "
                "seed ranges overlap, the test set would leak into training")


_SECTIONS = ("scene", "model", "train", "eval")
_SECTION_TYPES = {"scene": SceneConfig, "model": ModelConfig,
                  "train": TrainConfig, "eval": EvalConfig}


def _field_type(f) -> str:
    # sections defined in this module carry string annotations, the scene and
    # model configs carry live classes; compare everything as text
    return f.type if isinstance(f.type, str) else f.type.__name__


def _coerce(value, ftype: str, path: str):
    if ftype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'"{path}" must be an integer, got {value!r}')
        return value
    if ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'"{path}" must be a number, got {value!r}')
        return float(value)
    if ftype == "float | None":
        if value is None:
            return None
        return _coerce(value, "float", path)
    if ftype == "str":
        if not isinstance(value, str):
            raise ConfigError(f'"{path}" must be a string, got {value!r}')
        return value
    raise ConfigError(f'"{path}" has unsupported field type {ftype!r}')


def _section_from_dict(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f'"{path}" must be an object, got {d!r}')
    known = {f.name: f for f in fields(cls)}
    out = {}
    for k, v in d.items():
        if k not in known:
            close = difflib.get_close_matches(k, known, n=1)
            hint = f' (did you mean "{close[0]}"?)' if close else ""
            raise ConfigError(f'unknown config key "{path}.{k}"{hint}')
        out[k] = _coerce(v, _field_type(known[k]), f"{path}.{k}")
    return cls(**out)


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"config root must be an object, got {type(d).__name__}")
    version = d.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(
            f"config version {version!r} unsupported "
            f"(this build reads version {CONFIG_VERSION})")
    top = {f.name for f in fields(ExperimentConfig)} | {"version"}
    kwargs = {}
    for k, v in d.items():
        if k not in top:
            close = difflib.get_close_matches(k, top, n=1)
            hint = f' (did you mean "{close[0]}"?)' if close else ""
            raise ConfigError(f'unknown config key "{k}"{hint}')
        if k == "version":
            continue
        if k in _SECTION_TYPES:
            kwargs[k] = _section_from_dict(_SECTION_TYPES[k], v, k)
        elif k == "share_mode":
            kwargs[k] = _coerce(v, "str", k)
        elif k == "out_dir":
            kwargs[k] = _coerce(v, "str", k)
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = {"version": CONFIG_VERSION}
    for name in _SECTIONS:
        d[name] = dataclasses.asdict(getattr(cfg, name))
    d["share_mode"] = cfg.share_mode
    d["out_dir"] = cfg.out_dir
    return d


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    return config_from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True,
                      separators=(",", ":"))


def fingerprint(cfg: ExperimentConfig) -> str:
    """Stable 64-bit hex digest of the artifact-defining fields."""
    d = config_to_dict(cfg)
    # share_mode maps to a collaboration flag, the same axis the ablation
    # ladder varies under one fingerprint, so it stays out of the hash too
    del d["eval"], d["out_dir"], d["share_mode"]
    del d["train"]["steps"]         # a longer schedule may resume in place
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
