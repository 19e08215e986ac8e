"""Flat key = value experiment configuration.

The format is deliberately minimal so resolved configs diff cleanly: UTF-8
text, one ``key = value`` per line, '#' comments, no sections. Unknown keys
are errors, not warnings. Overrides from the command line are applied after
the file parse; the effective configuration is echoed to
``<outdir>/config.resolved`` with every auto value resolved.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from snislm.criteria import CriterionKind
from snislm.training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad value, missing input."""


_CHOICES = {
    "combiner": ("matrix", "average"),
    "criterion": ("ce", "bce", "nce", "is", "mode1", "mode2", "mode3"),
    "link": ("auto", "sigmoid", "exp", "softmax"),
    "sampler": ("auto", "with_replacement", "without_replacement", "exclude_target"),
    "share_batch": ("auto", "on", "off"),
    "noise": ("log_uniform", "unigram"),
    "optimizer": ("sgd", "adam"),
    "timing": ("wall", "off"),
}


@dataclass
class Settings:
    """Typed view of every configuration key, with defaults."""

    # synthetic data generation
    C: int = 200
    order: int = 1
    tokens: int = 100000
    concentration: float = 1.0
    state_cap: int = 512
    seed: int = 1
    # model
    dim: int = 64
    combiner: str = "matrix"
    # training
    criterion: str = "mode3"
    link: str = "auto"
    K: int = 16
    sampler: str = "auto"
    share_batch: str = "auto"
    noise: str = "log_uniform"
    smoothing: float = 1.0
    optimizer: str = "adam"
    lr: float = 0.05
    lr_decay: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 64
    shuffle: bool = True
    eval_every: int = 1
    eval_contexts: int = 512
    timing: str = "wall"
    # input artifacts
    corpus: str = ""
    task: str = ""
    model: str = ""
    # sweeps and benchmarks
    Ks: str = "2,8,32,128"
    warmup_batches: int = 20
    bench_batches: int = 200
    threads: int = 1

    def resolved_criterion(self) -> CriterionKind:
        link = None if self.link == "auto" else self.link
        return CriterionKind.of(self.criterion, link)

    def resolved_sampler(self) -> str:
        if self.sampler != "auto":
            return self.sampler
        if self.criterion == "mode2":
            return "exclude_target"
        if self.criterion == "mode3":
            return "without_replacement"
        return "with_replacement"

    def resolved_share_batch(self) -> bool:
        if self.share_batch != "auto":
            return self.share_batch == "on"
        return self.criterion != "mode2"

    def k_list(self) -> list[int]:
        try:
            ks = [int(part) for part in self.Ks.split(",") if part.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"key 'Ks': expected comma-separated integers, got {self.Ks!r}") from exc
        if not ks:
            raise ConfigError("key 'Ks': at least one K value required")
        return ks

    def to_train_config(self) -> TrainConfig:
        kind = self.resolved_criterion()
        return TrainConfig(
            criterion=kind,
            k=self.K,
            sampler=self.resolved_sampler(),
            share_batch=self.resolved_share_batch(),
            noise=self.noise,
            smoothing=self.smoothing,
            optimizer=self.optimizer,
            lr=self.lr,
            lr_decay=self.lr_decay,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            epochs=self.epochs,
            batch_size=self.batch_size,
            shuffle=self.shuffle,
            seed=self.seed,
            eval_every=self.eval_every,
            dim=self.dim,
            combiner=self.combiner,
            order=self.order,
            eval_contexts=self.eval_contexts,
            record_timing=self.timing == "wall",
        )


_FIELD_TYPES = {f.name: f.type for f in fields(Settings)}


def _parse_value(key: str, raw: str, source: str) -> int | float | bool | str:
    ftype = _FIELD_TYPES.get(key)
    if ftype is None:
        raise ConfigError(f"{source}: unknown key {key!r}")
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        value = raw
    except ValueError as exc:
        raise ConfigError(f"{source}: key {key!r} expects {ftype}, got {raw!r}") from exc
    choices = _CHOICES.get(key)
    if choices is not None and value not in choices:
        raise ConfigError(f"{source}: key {key!r} must be one of {choices}, got {value!r}")
    return value


def parse_assignments(lines: list[str], source: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw, f"{source}:{lineno}")
    return values


def load_settings(
    config_path: str | Path | None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> Settings:
    """File values, then --set overrides in order, then an explicit --seed."""
    settings = Settings()
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        for key, value in parse_assignments(text.splitlines(), str(path)).items():
            setattr(settings, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        setattr(settings, key.strip(), _parse_value(key.strip(), raw, "--set"))
    if seed is not None:
        settings.seed = seed
    return settings


def resolved_text(settings: Settings) -> str:
    """Canonical echo of the effective configuration, auto values resolved."""
    effective = Settings(**{f.name: getattr(settings, f.name) for f in fields(Settings)})
    effective.link = settings.resolved_criterion().link
    effective.sampler = settings.resolved_sampler()
    effective.share_batch = "on" if settings.resolved_share_batch() else "off"
    lines = []
    for f in sorted(fields(Settings), key=lambda f: f.name):
        value = getattr(effective, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def write_resolved(settings: Settings, outdir: str | Path) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "config.resolved"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(resolved_text(settings), encoding="utf-8", newline="\n")
    tmp.replace(path)
    return path
