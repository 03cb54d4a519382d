"""Run configuration and the flat YAML config file."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .dsp import DspConfig
from .errors import ConfigError

TASKS = ("a", "e", "i", "o", "u", "pa", "ta", "ka")
HEADS = ("hypernet", "plain", "gmu", "concat")
ABLATION_OVERRIDES = {
    "no-hypernet": {"head": "plain", "condition_mode": "noise"},
    "egemaps-cond": {"head": "hypernet", "condition_mode": "data"},
    "mfcc": {"input_kind": "mfcc"},
    "no-pretrain": {"pretrained": False, "weights_path": None},
}
ABLATIONS = tuple(ABLATION_OVERRIDES)


def normalize_task(task: str) -> str:
    t = str(task).strip().lower()
    if t.startswith("vowel_"):
        t = t[len("vowel_") :]
    if t.startswith("rhythm"):
        t = t[len("rhythm") :]
    if t not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    return t


@dataclass
class RunConfig:
    task: str = "pa"
    head: str = "hypernet"
    condition_mode: str = "noise"
    condition_policy: str = "fixed_per_run"
    hyper_hidden: int = 512
    hyper_bias: str = "joint"
    gmu_hidden: int = 768
    input_kind: str = "logmel"
    pretrained: bool = True
    weights_path: str | None = None
    freeze: bool = False
    dropout: float = 0.5
    epochs: int = 30
    lr: float = 1e-5
    batch_size: int = 8
    optimizer: str = "adam"
    folds: int = 5
    repetitions: int = 4
    seed: int = 0
    save_checkpoints: bool = True

    def __post_init__(self):
        self.task = normalize_task(self.task)
        self.validate()

    def validate(self):
        choices = {
            "head": HEADS,
            "condition_mode": ("noise", "data"),
            "condition_policy": ("fixed_per_run", "per_step"),
            "hyper_bias": ("joint", "separate"),
            "input_kind": ("logmel", "mfcc"),
            "optimizer": ("adam", "sgd"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.condition_mode == "data" and self.head != "hypernet":
            raise ConfigError("condition_mode 'data' only applies to the hypernet head")
        for key in ("epochs", "batch_size", "folds", "repetitions", "hyper_hidden", "gmu_hidden"):
            v = getattr(self, key)
            if v < (0 if key == "epochs" else 1):
                raise ConfigError(f"{key} out of range: {v}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def check_runnable(self):
        if self.pretrained and not self.weights_path:
            raise ConfigError("pretrained=true needs weights_path (or use --ablation=no-pretrain)")
        if self.weights_path and self.pretrained and not Path(self.weights_path).is_file():
            raise ConfigError(f"weights file not found: {self.weights_path}")

    @property
    def tasks(self) -> tuple[str, ...]:
        if self.head == "gmu":
            return ("pa", "ta")
        if self.head == "concat":
            return TASKS
        return (self.task,)

    @property
    def normalize(self) -> str:
        return "imagenet" if self.pretrained else "unit"

    def with_ablation(self, ablation: str) -> "RunConfig":
        if ablation not in ABLATION_OVERRIDES:
            raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
        return replace(self, **ABLATION_OVERRIDES[ablation])


@dataclass
class Paths:
    manifest: str | None = None
    cache_dir: str = "cache"
    out_dir: str = "runs"
    egemaps_csv: str | None = None


@dataclass
class ConfigFile:
    dsp: DspConfig = field(default_factory=DspConfig)
    run: RunConfig = field(default_factory=RunConfig)
    paths: Paths = field(default_factory=Paths)
    input_kinds: tuple = ("logmel",)

    def to_dict(self) -> dict:
        out = {}
        out.update(asdict(self.dsp))
        out.update(asdict(self.run))
        out.update(asdict(self.paths))
        out["input_kinds"] = list(self.input_kinds)
        return out


def _split(raw: dict):
    groups = {"dsp": {}, "run": {}, "paths": {}}
    names = {
        "dsp": {f.name for f in fields(DspConfig)},
        "run": {f.name for f in fields(RunConfig)},
        "paths": {f.name for f in fields(Paths)},
    }
    unknown = []
    extra = {}
    for key, value in raw.items():
        for group, keys in names.items():
            if key in keys:
                groups[group][key] = value
                break
        else:
            if key == "input_kinds":
                extra[key] = value
            else:
                unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return groups, extra


def config_from_dict(raw: dict, overrides: dict | None = None, base_dir=None) -> ConfigFile:
    raw = dict(raw or {})
    raw.update(overrides or {})
    groups, extra = _split(raw)
    run_vals = groups["run"]
    try:
        dsp = DspConfig(**groups["dsp"])
        run = RunConfig(**run_vals)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    paths = Paths(**groups["paths"])
    if base_dir is not None:
        for key in ("manifest", "cache_dir", "out_dir", "egemaps_csv"):
            v = getattr(paths, key)
            if v is not None and not Path(v).is_absolute():
                setattr(paths, key, str(Path(base_dir) / v))
        if run.weights_path and not Path(run.weights_path).is_absolute():
            run.weights_path = str(Path(base_dir) / run.weights_path)
    kinds = extra.get("input_kinds", ["logmel"])
    if isinstance(kinds, str):
        kinds = [k.strip() for k in kinds.split(",")]
    for k in kinds:
        if k not in ("logmel", "mfcc"):
            raise ConfigError(f"input_kinds entries must be logmel or mfcc, got {k!r}")
    return ConfigFile(dsp, run, paths, tuple(kinds))


def load_config(path=None, overrides: dict | None = None) -> ConfigFile:
    if path is None:
        return config_from_dict({}, overrides)
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return config_from_dict(raw, overrides, base_dir=Path(path).parent)


def dump_config(cfg: ConfigFile, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
