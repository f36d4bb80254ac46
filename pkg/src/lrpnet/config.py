"""Experiment configuration as a flat ``key = value`` file with four sections.

    [network]   stage widths, classes, selection init
    [lrp]       enabled flag and block settings
    [train]     optimiser, schedule, augmentation, seed
    [data]      synthetic scene settings, split sizes, dataset path

``#`` starts a comment.  Unknown sections or keys are errors, so a typo never
silently falls back to a default.
"""

from __future__ import annotations

import hashlib
import pathlib
from dataclasses import dataclass, field, fields, replace

from .lrp import LrpConfig
from .network import NetworkConfig
from .synth import SynthSceneSpec
from .train import TrainConfig

SECTIONS = ("network", "lrp", "train", "data")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    num_train: int = 100
    num_val: int = 20
    dataset: str = ""
    scene: SynthSceneSpec = field(default_factory=SynthSceneSpec)


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=int(seed)))


# ---------------------------------------------------------------------------
# value codecs


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_tuple(conv):
    def parse(s: str):
        s = s.strip()
        if not s:
            return ()
        return tuple(conv(p.strip()) for p in s.split(","))
    return parse


def _optional(parse):
    def inner(s: str):
        return None if s.strip().lower() == "none" else parse(s)
    return inner


def _codec_for(default, name):
    """Parser for a field, judged from its default value."""
    overrides = {
        "taps": _optional(_parse_tuple(int)),
        "class_weights": _optional(_parse_tuple(float)),
        "object_kinds": _parse_tuple(str),
        "dilations": _parse_tuple(int),
        "stage_channels": _parse_tuple(int),
        "object_count": _parse_tuple(int),
    }
    if name in overrides:
        return overrides[name]
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_tuple(float)
    return str


def _plain_fields(obj, skip=()):
    return [(f.name, getattr(obj, f.name)) for f in fields(obj) if f.name not in skip]


# ---------------------------------------------------------------------------
# flat key/value views


def network_config_to_kv(cfg: NetworkConfig) -> dict:
    kv = {f"network.{k}": _fmt(v) for k, v in _plain_fields(cfg, skip=("lrp",))}
    kv["lrp.enabled"] = _fmt(cfg.lrp is not None)
    lrp = cfg.lrp or LrpConfig()
    kv.update({f"lrp.{k}": _fmt(v) for k, v in _plain_fields(lrp)})
    return kv


def network_config_from_kv(kv: dict) -> NetworkConfig:
    net = _build(NetworkConfig, {k[8:]: v for k, v in kv.items() if k.startswith("network.")},
                 "network", skip=("lrp",))
    lrp_kv = {k[4:]: v for k, v in kv.items() if k.startswith("lrp.")}
    try:
        enabled = _parse_bool(lrp_kv.pop("enabled", "false"))
    except ValueError as exc:
        raise ConfigError(f"lrp.enabled: {exc}") from None
    lrp = _build(LrpConfig, lrp_kv, "lrp") if enabled else None
    return replace(net, lrp=lrp)


def _build(cls, values: dict, section: str, skip=()):
    proto = cls()
    known = {name: default for name, default in _plain_fields(proto, skip)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        try:
            kwargs[key] = _codec_for(known[key], key)(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
    try:
        return replace(proto, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def config_to_kv(cfg: ExperimentConfig) -> dict:
    kv = network_config_to_kv(cfg.network)
    kv.update({f"train.{k}": _fmt(v) for k, v in _plain_fields(cfg.train)})
    kv.update({f"data.{k}": _fmt(v) for k, v in _plain_fields(cfg.data, skip=("scene",))})
    kv.update({f"data.{k}": _fmt(v) for k, v in _plain_fields(cfg.data.scene)})
    return kv


def config_from_kv(kv: dict) -> ExperimentConfig:
    for key in kv:
        section = key.split(".", 1)[0]
        if section not in SECTIONS or "." not in key:
            raise ConfigError(f"unknown key {key}")
    network = network_config_from_kv({k: v for k, v in kv.items() if k.split(".")[0] in ("network", "lrp")})
    train = _build(TrainConfig, {k[6:]: v for k, v in kv.items() if k.startswith("train.")}, "train")
    data_kv = {k[5:]: v for k, v in kv.items() if k.startswith("data.")}
    scene_keys = {f.name for f in fields(SynthSceneSpec)}
    scene = _build(SynthSceneSpec, {k: v for k, v in data_kv.items() if k in scene_keys}, "data")
    data = _build(DataConfig, {k: v for k, v in data_kv.items() if k not in scene_keys}, "data",
                  skip=("scene",))
    if scene.num_classes != network.num_classes:
        raise ConfigError("data.num_classes and network.num_classes differ")
    return ExperimentConfig(network, train, replace(data, scene=scene))


# ---------------------------------------------------------------------------
# text form


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    kv = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1].strip() not in SECTIONS:
                raise ConfigError(f"{where}: unknown section {line}")
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{where}: key outside any section")
        key, value = (p.strip() for p in line.split("=", 1))
        full = f"{section}.{key}"
        if full in kv:
            raise ConfigError(f"{where}: duplicate key {full}")
        kv[full] = value
    cfg = config_from_kv(_fill_num_classes(kv))
    return cfg


def _fill_num_classes(kv: dict) -> dict:
    # one class count drives both the scenes and the network head
    kv = dict(kv)
    if "network.num_classes" in kv and "data.num_classes" not in kv:
        kv["data.num_classes"] = kv["network.num_classes"]
    elif "data.num_classes" in kv and "network.num_classes" not in kv:
        kv["network.num_classes"] = kv["data.num_classes"]
    return kv


def load_config(path) -> ExperimentConfig:
    path = pathlib.Path(path)
    return parse_config(path.read_text(), str(path))


def format_config(cfg: ExperimentConfig, header: list[str] | None = None) -> str:
    """Full resolved config; ``parse_config(format_config(c)) == c``."""
    kv = config_to_kv(cfg)
    lines = [f"# {h}" for h in header or []]
    for section in SECTIONS:
        lines.append(f"[{section}]")
        lines += [f"{k.split('.', 1)[1]} = {v}" for k, v in kv.items() if k.startswith(section + ".")]
        lines.append("")
    return "\n".join(lines)


ASSUMPTION_NOTE = "momentum, weight_decay and poly_power are assumed defaults, not published values"


def resolved_header(cfg: ExperimentConfig) -> list[str]:
    return [f"build {build_id()}", f"seed {cfg.seed}", ASSUMPTION_NOTE]


def build_id() -> str:
    """Short content hash of the package sources."""
    h = hashlib.sha1()
    root = pathlib.Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]
