"""Run configuration: sectioned ``key = value`` files with typed defaults."""

from __future__ import annotations

import configparser
import copy
import os
from pathlib import Path


class ConfigError(ValueError):
    pass


# Defaults describe a desk-scale run on the toy corpus. Types come from the defaults.
DEFAULTS = {
    "run": {
        "seed": 0,
        "workdir": "",
        "corpus": "",
    },
    "toy": {
        "speakers": 8,
        "utterances": 12,
    },
    "encoder": {
        "steps": 2000,
        "speakers_per_batch": 4,
        "utterances_per_speaker": 5,
        "lr": 1e-3,
        "hidden": 128,
        "layers": 2,
        "embed_dim": 64,
        "partial_frames": 160,
        "train_utts": 8,
        "enroll_utts": 4,
        "freeze": "",
    },
    "synth": {
        "steps": 2000,
        "batch_size": 20,
        "lr": 1e-3,
        "speakers": 4,
        "utts_per_speaker": 5,
        "embed_dim": 32,
        "enc_hidden": 64,
        "attn_dim": 64,
        "prenet": 64,
        "prenet_dropout": 0.5,
        "att_rnn": 128,
        "dec_rnn": 128,
        "reduction": 2,
        "guide_weight": 1.0,
        "guide_sigma": 0.2,
        "freeze": "",
    },
    "vocoder": {
        "steps": 3000,
        "segment": 8000,
        "lr": 2e-3,
        "channels": 32,
        "hidden": 64,
        "clips": 1,
        "freeze": "",
    },
    "dsp": {
        "griffin_lim_iterations": 60,
    },
    "clone": {
        "max_frames": 400,
        "stop_threshold": 0.7,
    },
}


def _coerce(section: str, key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw.strip()


class RunConfig:
    """Nested mapping section -> key -> value; attribute access by section."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, dotted: str, raw: str):
        """Override ``section.key`` from a string, as from a command-line flag."""
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        self.values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def resolve_paths(self, base: Path | None = None) -> "RunConfig":
        """Make workdir and corpus absolute; workdir falls back to $NVC_WORKDIR, then ./work."""
        run = self.values["run"]
        base = Path(base or os.getcwd())
        wd = run["workdir"] or os.environ.get("NVC_WORKDIR", "") or "work"
        wd = Path(wd)
        run["workdir"] = str((wd if wd.is_absolute() else base / wd).resolve())
        corpus = Path(run["corpus"]) if run["corpus"] else Path(run["workdir"]) / "corpus"
        run["corpus"] = str((corpus if corpus.is_absolute() else base / corpus).resolve())
        return self

    @property
    def workdir(self) -> Path:
        return Path(self.values["run"]["workdir"])

    @property
    def corpus(self) -> Path:
        return Path(self.values["run"]["corpus"])

    def freeze_patterns(self, section: str) -> list:
        return [p.strip() for p in self.values[section]["freeze"].split(",") if p.strip()]


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = copy.deepcopy(DEFAULTS)
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
    return RunConfig(values)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig(copy.deepcopy(DEFAULTS))
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, kv in cfg.values.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in kv.items())
        lines.append("")
    return "\n".join(lines)
