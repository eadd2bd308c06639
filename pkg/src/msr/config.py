"""INI run configs: typed sections, strict validation, line-level diagnostics."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    name: str = ""
    suite: str = "synthetic"  # synthetic | rotation | glyphs
    methods: list = field(default_factory=lambda: ["msr_fc"])
    seed: int = 0
    output_dir: str = ""
    log_every: int = 50


@dataclass
class TasksSection:
    family: str = "lc_rank_k"
    rank: int = 1
    input_dim: int = 16
    width: int = 3
    n_train: int = 400
    n_test: int = 100
    examples_per_train_task: int = 20
    test_support: int = 1
    test_query: int = 10
    group: str = "C4"
    side: int = 9
    kernel: int = 3


@dataclass
class ModelSection:
    # rank of the full symmetry matrix in reparameterized dense layers; 0 = input dim
    k: int = 0
    channels: int = 8
    conv_layers: int = 3


@dataclass
class OptimSection:
    outer_lr: float = 5e-4
    outer_steps: int = 1000
    batch_size: int = 32
    inner_lr: float = 0.02
    inner_steps_train: int = 3
    inner_steps_test: int = 9
    learn_filter_init: bool = True
    mtsr_steps: int = 500
    mtsr_lr: float = 1e-3


@dataclass
class GlyphsSection:
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 5
    n_classes_train: int = 40
    n_classes_test: int = 20
    per_class: int = 20
    side: int = 28
    test_episodes: int = 500
    idx_images: str = ""
    idx_labels: str = ""


@dataclass
class AugmentSection:
    enabled: bool = False
    scale_min: float = 0.8
    scale_max: float = 1.0
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    max_rotation_deg: float = 30.0


@dataclass
class ExportSection:
    matrices: list = field(default_factory=list)
    normalization: str = "abs_max"


SECTIONS = {
    "experiment": ExperimentSection,
    "tasks": TasksSection,
    "model": ModelSection,
    "optim": OptimSection,
    "glyphs": GlyphsSection,
    "augment": AugmentSection,
    "export": ExportSection,
}

SUITES = ("synthetic", "rotation", "glyphs")


@dataclass
class RunConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    tasks: TasksSection = field(default_factory=TasksSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    glyphs: GlyphsSection = field(default_factory=GlyphsSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    export: ExportSection = field(default_factory=ExportSection)

    def to_ini(self) -> str:
        """Canonical text form; parses back to an equal config."""
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            for f in dataclasses.fields(SECTIONS[sec]):
                val = getattr(getattr(self, sec), f.name)
                if isinstance(val, list):
                    val = ", ".join(val)
                elif isinstance(val, bool):
                    val = "true" if val else "false"
                lines.append(f"{f.name} = {val}")
            lines.append("")
        return "\n".join(lines)


def _line_of(text: str, section: str, key: str | None) -> int:
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
        elif current == section and key is not None:
            name = line.split("=", 1)[0].split(":", 1)[0].strip().lower()
            if name == key:
                return n
    return 0


def _coerce(kind, raw: str, where: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    if kind is list:
        return [p.strip() for p in raw.split(",") if p.strip()]
    return raw


def _field_kind(f: dataclasses.Field):
    return {"str": str, "int": int, "float": float, "bool": bool, "list": list}[f.type]


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    cfg = RunConfig()
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, sec, None)}: unknown section [{sec}]")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[sec])}
        target = getattr(cfg, sec)
        for key, raw in parser.items(sec):
            line = _line_of(text, sec, key)
            where = f"{source}:{line}: {sec}.{key}"
            if key not in fields:
                raise ConfigError(f"{where}: unknown field")
            setattr(target, key, _coerce(_field_kind(fields[key]), raw, where))
    validate(cfg, text, source)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists() and path.with_suffix(".ini").exists():
        path = path.with_suffix(".ini")
    cfg = parse_config(path.read_text(), str(path))
    if not cfg.experiment.name:
        cfg.experiment.name = path.stem
    return cfg


def validate(cfg: RunConfig, text: str = "", source: str = "<config>") -> None:
    from .experiments import METHODS

    def fail(sec, key, msg):
        line = _line_of(text, sec, key) if text else 0
        raise ConfigError(f"{source}:{line}: {sec}.{key}: {msg}")

    e, t, o = cfg.experiment, cfg.tasks, cfg.optim
    if e.suite not in SUITES:
        fail("experiment", "suite", f"must be one of {SUITES}")
    if not e.methods:
        fail("experiment", "methods", "at least one method required")
    for m in e.methods:
        if m not in METHODS:
            fail("experiment", "methods", f"unknown method {m!r}")
        if METHODS[m].suite != e.suite:
            fail("experiment", "methods", f"method {m!r} belongs to suite {METHODS[m].suite!r}")
    if e.seed < 0:
        fail("experiment", "seed", "must be non-negative")
    if e.log_every < 1:
        fail("experiment", "log_every", "must be positive")
    for key in ("n_train", "n_test", "examples_per_train_task", "test_support", "test_query"):
        if getattr(t, key) < 0:
            fail("tasks", key, "must be non-negative")
    if e.suite == "synthetic" and t.rank < 1:
        fail("tasks", "rank", "must be positive")
    for key in ("outer_steps", "inner_steps_train", "inner_steps_test", "mtsr_steps"):
        if getattr(o, key) < 0:
            fail("optim", key, "must be non-negative")
    if o.batch_size < 1:
        fail("optim", "batch_size", "must be positive")
    if o.outer_lr <= 0:
        fail("optim", "outer_lr", "must be positive")
    if cfg.export.normalization not in ("abs_max", "signed"):
        fail("export", "normalization", "must be abs_max or signed")
    a = cfg.augment
    if not 0 < a.scale_min <= a.scale_max <= 1:
        fail("augment", "scale_min", "need 0 < scale_min <= scale_max <= 1")
    for key in ("p_hflip", "p_vflip"):
        if not 0 <= getattr(a, key) <= 1:
            fail("augment", key, "must be a probability")
