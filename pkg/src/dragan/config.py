"""Run configuration read from ``key = value`` files with ``[section]`` headers.

Sections may nest with dots, e.g. ``[train.joint]``. Values are Python
literals where they parse as one (numbers, booleans, tuples), strings
otherwise.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
from pathlib import Path
from typing import Any, Dict, Optional

from .exceptions import ConfigError
from .text_data import CorpusSpec

SECTIONS = {
    "paths": {"data_dir", "work_dir"},
    "corpus": {f.name for f in dataclasses.fields(CorpusSpec)},
    "generator": {"layers", "heads", "d_model", "d_ff", "fragment_len", "s_max", "beam_size", "num_starts", "q_max"},
    "classifier": {"layers", "heads", "d_model", "d_ff", "max_len"},
    "eval": {"tau", "checkpoint"},
    "bench": {"n_queries", "warmup", "checkpoint"},
    "gradcheck": {"eps", "tol", "closed_form_tol"},
}
TRAIN_KEYS = {
    "epochs", "batch_size", "lr", "beta1", "beta2", "eps", "clip_norm", "start_loss_weight", "renormalize",
    "fixed_generator", "equal_probability", "full_title", "query_only", "concat_all", "gumbel_in_weights",
    "gold_fragments",
}
TRAIN_SECTIONS = ("train.pretrain_gen", "train.pretrain_cls", "train.joint")

DEFAULTS = {
    "paths": {"data_dir": "data", "work_dir": "work"},
    "eval": {"tau": 0.5, "checkpoint": "joint.drgn"},
    "bench": {"n_queries": 100, "warmup": 5, "checkpoint": "joint.drgn"},
    "gradcheck": {"eps": 1e-5, "tol": 1e-4, "closed_form_tol": 1e-6},
}


def _value(raw: str) -> Any:
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


class RunConfig:
    """Validated sections of a config file, each a plain dict."""

    def __init__(self, sections: Optional[Dict[str, Dict[str, Any]]] = None):
        self.sections = {k: dict(v) for k, v in DEFAULTS.items()}
        for name, values in (sections or {}).items():
            self._check(name, values)
            self.sections.setdefault(name, {}).update(values)

    @staticmethod
    def _check(name, values):
        if name in TRAIN_SECTIONS:
            allowed = TRAIN_KEYS
        elif name in SECTIONS:
            allowed = SECTIONS[name]
        else:
            raise ConfigError(f"unknown section [{name}]")
        unknown = set(values) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.sections.get(name, {}))

    def train(self, stage: str) -> Dict[str, Any]:
        return self.section(f"train.{stage}")

    def corpus_spec(self, seed: Optional[int] = None) -> CorpusSpec:
        kw = self.section("corpus")
        if "title_length" in kw:
            kw["title_length"] = tuple(kw["title_length"])
        if seed is not None:
            kw["seed"] = seed
        try:
            return CorpusSpec(**kw).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def path(self, key: str) -> Path:
        return Path(str(self.sections["paths"][key]))


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if parser.defaults():
        raise ConfigError(f"{path}: keys outside any section")
    raw = {s: {k: _value(v) for k, v in parser.items(s)} for s in parser.sections()}
    cfg = RunConfig(raw)
    base = path.parent
    for key in ("data_dir", "work_dir"):
        p = Path(str(cfg.sections["paths"][key]))
        if not p.is_absolute() and key in raw.get("paths", {}):
            cfg.sections["paths"][key] = str(base / p)
    return cfg
