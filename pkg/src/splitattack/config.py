"""Run configuration: nested dataclasses loaded from JSON, with fail-fast validation.

Unknown keys and bad values raise :class:`ConfigurationError` naming the field
path (``training.lr`` and so on), before any data is generated.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .attack import AttackConfig
from .data import ATTACKER_POOL_SIZES, PartitionPlan, SynthSpec
from .engine import ConfigurationError, InputError, build_network
from .protocol import SplitPlan
from .shadow import default_shadow_arch

DESK_LAYERS = [
    {"kind": "conv2d", "out_channels": 16, "kernel": 3, "stride": 2, "padding": 1},
    {"kind": "relu"},
    {"kind": "residual-block", "kernel": 3},
    {"kind": "relu"},
    {"kind": "conv2d", "out_channels": 16, "kernel": 3, "padding": 1},
    {"kind": "relu"},
    {"kind": "avgpool2d", "size": 2},
    {"kind": "flatten"},
    {"kind": "dense", "units": 10},
]

# alpha rows of the similarity-constraint table
ALPHA_TABLE = (0.0, 0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass
class TaskSection:
    generator: str = "digits"
    classes: int = 10
    size: int = 12
    samples_per_class: int = 500
    noise: float = 0.1
    test_samples_per_class: int = 50
    # optional IDX pair; when set the synthetic generator is not used for the client data
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_test_images: str | None = None
    idx_test_labels: str | None = None

    def synth_spec(self, test: bool = False) -> SynthSpec:
        n = self.test_samples_per_class if test else self.samples_per_class
        return SynthSpec(self.classes, self.size, n, self.generator, self.noise)


@dataclass
class ModelSection:
    layers: list[dict] = field(default_factory=lambda: copy.deepcopy(DESK_LAYERS))
    n_input: int = 1
    n_output: int = 1

    def plan(self) -> SplitPlan:
        return SplitPlan(self.n_input, len(self.layers) - self.n_input - self.n_output, self.n_output)


@dataclass
class TrainingSection:
    rounds: int = 1500
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    n_clients: int = 10
    scheme: str = "iid"
    client_fraction: float = 0.8
    labels_per_client: int = 2
    concentration: float = 0.5


@dataclass
class ShadowSection:
    enabled: bool = True
    alpha: float = 1.0
    shadow_arch: list[dict] | None = None
    shadow_lr: float = 0.01
    pool_size: int = 2048
    attacker_source: str = "shifted"
    attacker_generator: str = "bars"


@dataclass
class AttackSection:
    epsilon: float = 0.3
    beta: float = 0.3
    K: int = 1
    input_range: list[float] = field(default_factory=lambda: [0.0, 1.0])
    step: str = "sign"

    def to_attack_config(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.beta, self.K, tuple(self.input_range), self.step)


@dataclass
class ProbeSection:
    enabled: bool = True
    # samples taken from each of the test set and the attacker pool to estimate d_hat
    probe_samples: int = 256


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    shadow: ShadowSection = field(default_factory=ShadowSection)
    attack: AttackSection = field(default_factory=AttackSection)
    probes: ProbeSection = field(default_factory=ProbeSection)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **dotted: Any) -> "RunConfig":
        """Copy with overrides given as ``{"shadow.alpha": 10.0, "seed": 3}``."""
        d = self.to_dict()
        for key, value in dotted.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigurationError(f"{key}: unknown section {p!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigurationError(f"{key}: unknown field")
            node[parts[-1]] = value
        return from_dict(d)

    def partition_plan(self) -> PartitionPlan:
        t, s = self.training, self.shadow
        return PartitionPlan(
            n_clients=t.n_clients,
            scheme=t.scheme,
            seed=self.seed,
            labels_per_client=t.labels_per_client,
            concentration=t.concentration,
            client_fraction=t.client_fraction,
            attacker_size=s.pool_size if s.enabled else 0,
            attacker_source=s.attacker_source,
            attacker_generator=s.attacker_generator,
        )

    def validate(self) -> None:
        _validate(self)


SECTIONS = {
    "task": TaskSection,
    "model": ModelSection,
    "training": TrainingSection,
    "shadow": ShadowSection,
    "attack": AttackSection,
    "probes": ProbeSection,
}

PRESETS: dict[str, dict] = {
    # desk-scale stand-in for the reference setup: 10 clients, 80% of the data
    # spread evenly, lr 0.01 with momentum, plain-SGD shadow at 0.01, alpha 1,
    # eps = beta = 0.3, one attack step
    "paper-desk": {},
    # honest split training only
    "honest": {"shadow": {"enabled": False}},
    # seconds-scale run for smoke tests
    "tiny": {
        "task": {"samples_per_class": 40, "test_samples_per_class": 10},
        "training": {"rounds": 30, "n_clients": 2},
        "shadow": {"pool_size": 64},
        "probes": {"probe_samples": 32},
    },
}


def _check_type(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and value is not None and not isinstance(value, str):
        raise ConfigurationError(f"{path}: expected a string, got {value!r}")
    return value


def _build_section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{name}: expected an object")
    inst = cls()
    known = {f.name for f in fields(cls)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigurationError(f"{name}.{key}: unknown field")
        setattr(inst, key, _check_type(f"{name}.{key}", value, getattr(inst, key)))
    return inst


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be an object")
    cfg = RunConfig()
    for key, value in raw.items():
        if key in SECTIONS:
            setattr(cfg, key, _build_section(key, SECTIONS[key], value))
        elif key in ("seed", "out"):
            setattr(cfg, key, _check_type(key, value, getattr(cfg, key)))
        else:
            raise ConfigurationError(f"{key}: unknown field")
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_dict(PRESETS[name])


def load_config(path=None, preset_name: str | None = None) -> RunConfig:
    """Start from ``preset_name`` (default ``paper-desk``) and overlay the JSON file at ``path``."""
    base = RunConfig().to_dict() if preset_name is None else preset(preset_name).to_dict()
    if path is None:
        return from_dict(base)
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{path}: not valid JSON ({err})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be an object")
    return from_dict(_merge(base, raw))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigurationError(f"{path}: {msg}")


def _validate(cfg: RunConfig) -> None:
    t, m, tr, sh, at = cfg.task, cfg.model, cfg.training, cfg.shadow, cfg.attack
    using_idx = t.idx_images is not None or t.idx_labels is not None
    if using_idx:
        _require(t.idx_images is not None and t.idx_labels is not None, "task.idx_images", "needs idx_labels too")
        _require(t.idx_test_images is not None and t.idx_test_labels is not None,
                 "task.idx_test_images", "an IDX task needs a test pair")
    else:
        try:
            t.synth_spec().validate()
            t.synth_spec(test=True).validate()
        except InputError as err:
            raise ConfigurationError(f"task: {err}") from None
    _require(t.test_samples_per_class >= 1, "task.test_samples_per_class", "must be positive")

    _require(isinstance(m.layers, list) and len(m.layers) >= 3, "model.layers", "need at least three layers")
    try:
        plan = m.plan()
        plan.validate(len(m.layers))
    except ConfigurationError as err:
        raise ConfigurationError(f"model: {err}") from None
    in_shape = (1, t.size, t.size)
    try:
        net = build_network(in_shape, m.layers, seed=0)
    except (ConfigurationError, TypeError, KeyError, ValueError) as err:
        raise ConfigurationError(f"model.layers: {err}") from None
    _require(net.output_shape == (t.classes,), "model.layers",
             f"network output {net.output_shape} does not match {t.classes} classes")

    _require(tr.rounds >= 0, "training.rounds", "must be non-negative")
    _require(tr.lr >= 0, "training.lr", "must be non-negative")
    _require(0.0 <= tr.momentum < 1.0, "training.momentum", "must lie in [0, 1)")
    _require(tr.batch_size >= 1, "training.batch_size", "must be positive")
    try:
        cfg.partition_plan().validate()
    except InputError as err:
        raise ConfigurationError(f"training: {err}") from None

    _require(sh.alpha >= 0, "shadow.alpha", "must be non-negative")
    _require(sh.shadow_lr > 0, "shadow.shadow_lr", "must be positive")
    if sh.enabled:
        _require(sh.pool_size >= 1, "shadow.pool_size", "must be positive")
        o1 = build_network(in_shape, m.layers[: plan.n_input], seed=0).output_shape
        arch = sh.shadow_arch
        try:
            arch = arch if arch is not None else default_shadow_arch(in_shape, o1)
            shadow_out = build_network(in_shape, arch, seed=0).output_shape
        except (ConfigurationError, TypeError, KeyError, ValueError) as err:
            raise ConfigurationError(f"shadow.shadow_arch: {err}") from None
        _require(shadow_out == o1, "shadow.shadow_arch", f"output {shadow_out} != o1 shape {o1}")
    try:
        at.to_attack_config().validate()
    except (ConfigurationError, TypeError, ValueError) as err:
        raise ConfigurationError(f"attack: {err}") from None
    _require(cfg.probes.probe_samples >= 1, "probes.probe_samples", "must be positive")


__all__ = [
    "ALPHA_TABLE",
    "ATTACKER_POOL_SIZES",
    "DESK_LAYERS",
    "PRESETS",
    "RunConfig",
    "from_dict",
    "load_config",
    "preset",
    "save_config",
]
