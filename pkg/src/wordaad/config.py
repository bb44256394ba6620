"""Run configuration: a sectioned ``key = value`` file with typed, validated keys.

Defaults encode the published pipeline, so an empty file runs it unchanged
on synthetic data. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field

from .evaluation import VARIANTS, ExperimentConfig
from .eegnet import EegNetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def inner(text):
        return None if text.strip().lower() in ("none", "") else parse(text)
    return inner


def _float(text):
    t = text.strip().lower()
    if t in ("-inf", "-infinity"):
        return -math.inf
    return float(t)


def _list(parse):
    def inner(text):
        return tuple(parse(x) for x in text.replace(";", ",").split(",") if x.strip())
    return inner


def _choice(*options):
    def inner(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {t!r}")
        return t
    return inner


def _variants(text):
    out = _list(str.strip)(text)
    bad = set(out) - set(VARIANTS)
    if bad:
        raise ValueError(f"unknown variants {sorted(bad)}")
    return out


def _folds(text):
    return None if text.strip().lower() in ("all", "none") else _list(int)(text)


_E = EegNetConfig()
_T = TrainConfig()
_X = ExperimentConfig()

# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "master_seed": (int, 0),
    },
    "synth": {
        "n_subjects": (int, 24),
        "snr_db": (_float, 0.0),
        "snr_db_p1": (_optional(_float), None),
        "snr_db_p2": (_optional(_float), None),
        "snr_db_p3": (_optional(_float), None),
        "snr_reference": (_choice("peak", "global"), "peak"),
        "paradigms": (_list(int), (1, 2, 3)),
        "raw": (_bool, False),
        "raw_subjects": (int, 2),
    },
    "preprocess": {
        "lo_hz": (float, 0.5),
        "hi_hz": (float, 40.0),
        "n_taps": (int, 3301),
        "reject_uv": (_optional(float), 200.0),
        "baseline": (_bool, False),
    },
    "augment": {
        "gains_db": (_list(float), (0.0, 3.0, 6.0)),
        "k_max": (int, 3),
        "materialize": (_bool, False),
    },
    "model": {
        "F1": (int, _E.F1), "K1": (int, _E.K1), "D": (int, _E.D), "F2": (int, _E.F2), "K2": (int, _E.K2),
        "pool1": (int, _E.pool1), "pool2": (int, _E.pool2), "dropout_p": (float, _E.dropout_p),
        "max_norm_depthwise": (_optional(float), _E.max_norm_depthwise),
        "max_norm_dense": (_optional(float), _E.max_norm_dense),
    },
    "train": {
        "epochs": (int, _T.epochs),
        "batch_size": (int, _T.batch_size),
        "lr": (float, _T.lr),
        "batches_per_pass": (_optional(int), None),
        "val_subsample": (_optional(int), None),
    },
    "experiment": {
        "scheme": (_choice("8fold", "loso"), "8fold"),
        "variants": (_variants, _X.variants),
        "paradigms": (_list(int), _X.paradigms),
        "folds": (_folds, None),
        "n_folds": (int, 8),
        "val_fraction": (float, 0.2),
        "augment_validation": (_bool, True),
        "n_permutations": (int, _X.n_permutations),
    },
    "baseline": {
        "snr_db": (_float, _X.baseline_snr_db),
        "trial_s": (float, _X.baseline_trial_s),
        "lam_grid": (_list(float), _X.baseline_lam_grid),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # section -> key -> value
    source: str = ""

    def __getitem__(self, section) -> dict:
        return self.values[section]

    @property
    def master_seed(self) -> int:
        return self.values["run"]["master_seed"]

    def with_seed(self, seed) -> "RunConfig":
        values = {s: dict(v) for s, v in self.values.items()}
        values["run"]["master_seed"] = int(seed)
        return RunConfig(values, self.source)

    def to_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()}
                for s, kv in self.values.items()}

    def to_text(self) -> str:
        """Canonical config text; parsing it reproduces this configuration."""
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            for k, v in kv.items():
                lines.append(f"{k} = {_render(v)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # typed views ------------------------------------------------------------

    def snr_db(self):
        s = self.values["synth"]
        per = {p: s[f"snr_db_p{p}"] for p in (1, 2, 3)}
        if all(v is None for v in per.values()):
            return s["snr_db"]
        return {p: (s["snr_db"] if v is None else v) for p, v in per.items()}

    def model_config(self) -> EegNetConfig:
        return EegNetConfig(**self.values["model"]).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def experiment_config(self) -> ExperimentConfig:
        x, b = self.values["experiment"], self.values["baseline"]
        return ExperimentConfig(train=self.train_config(), model=self.model_config(), variants=x["variants"],
                                paradigms=x["paradigms"], augment_validation=x["augment_validation"],
                                folds=x["folds"], n_permutations=x["n_permutations"],
                                baseline_snr_db=b["snr_db"], baseline_trial_s=b["trial_s"],
                                baseline_lam_grid=b["lam_grid"])


def _render(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, float):
        v = float(v)  # numpy scalars render like Python floats
    if isinstance(v, float) and math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return repr(v) if isinstance(v, float) else str(v)


def defaults() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}, "<defaults>")


def parse_config(text: str, source="<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       delimiters=("=",), strict=True)
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = defaults()
    cfg.source = source
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            parse, _ = SCHEMA[section][key]
            try:
                cfg.values[section][key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {exc}") from exc
    try:
        cfg.model_config()
        cfg.train_config()
        cfg.experiment_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
