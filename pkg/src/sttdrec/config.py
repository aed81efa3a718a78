"""Run configuration: INI files, named presets and environment overrides.

Sections mirror the modules (``data``, ``model``, ``compress``, ``kd``,
``train``, ``run``).  ``[train]`` drives the teacher; ``[kd]`` may carry its
own ``lr`` and ``patience`` for the student and otherwise inherits them.  Any key can be overridden with an environment variable
``STTDREC_<SECTION>_<KEY>``, e.g. ``STTDREC_KD_BETA3=0.5``.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .distill import RETAILROCKET_BETAS, TMALL_BETAS, KDConfig
from .model import ModelConfig
from .tt_compress import DATASETS, FactorizedShape, Mode

ENV_PREFIX = "STTDREC_"


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())


_DATASET_COMMON = {
    "data": {"delimiter": ",", "min_item_count": "5", "val_fraction": "0.1"},
    "model": {"max_seq_len": "50", "num_layers": "1"},
    "train": {"lr": "0.001", "batch_size": "100", "weight_decay": "1e-5", "epochs": "30",
              "patience": "3"},
    "kd": {"tau": "0.2", "hot_fraction": "0.2"},
    "run": {"seed": "0", "out": "runs"},
}


def _dataset_preset(name: str, betas: tuple[float, float, float], rank: int, heads: int,
                  dropout: float) -> dict:
    info = DATASETS[name]
    items, dims = info["shapes"][1]
    p = {k: dict(v) for k, v in _DATASET_COMMON.items()}
    p["model"].update(num_heads=str(heads), dropout=str(dropout))
    p["model"]["embed_dim"] = str(info["embed_dim"])
    p["data"]["num_items"] = str(info["num_items"])
    p["compress"] = {"mode": "sttd", "item_factors": ",".join(map(str, items)),
                     "dim_factors": ",".join(map(str, dims)), "rank": str(rank),
                     "stp_divisor": "2"}
    p["kd"].update(beta1=str(betas[0]), beta2=str(betas[1]), beta3=str(betas[2]))
    return p


PRESETS: dict[str, dict[str, dict[str, str]]] = {
    "tmall": _dataset_preset("tmall", TMALL_BETAS, 60, 1, 0.5),
    "retailrocket": _dataset_preset("retailrocket", RETAILROCKET_BETAS, 60, 2, 0.2),
    "synthetic": {
        "data": {"delimiter": ",", "min_item_count": "5", "val_fraction": "0.1",
                 "num_items": "200", "synth_sessions": "2000", "synth_min_len": "3",
                 "synth_max_len": "10", "synth_sharpness": "inf", "synth_cyclic": "true",
                 "synth_skew": "1.2", "synth_branching": "4"},
        "model": {"embed_dim": "32", "max_seq_len": "10", "num_layers": "1", "num_heads": "1",
                  "dropout": "0.0"},
        "compress": {"mode": "sttd", "item_factors": "10,20", "dim_factors": "4,8",
                     "rank": "8", "stp_divisor": "2"},
        "train": {"lr": "0.003", "batch_size": "100", "weight_decay": "1e-5", "epochs": "30",
                  "patience": "3"},
        # the student tolerates (and needs) a larger step and more patience
        "kd": {"beta1": "0.1", "beta2": "0.001", "beta3": "0.8", "tau": "0.2",
               "hot_fraction": "0.2", "lr": "0.01", "patience": "5"},
        "run": {"seed": "0", "out": "runs"},
    },
}


@dataclass
class RunConfig:
    num_items: int | None
    teacher: dict
    shape: FactorizedShape | None
    mode: Mode
    kd: KDConfig
    lr: float = 1e-3
    batch_size: int = 100
    weight_decay: float = 1e-5
    epochs: int = 30
    patience: int | None = 3
    seed: int = 0
    out: Path = Path("runs")
    data: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    def teacher_config(self, num_items: int) -> ModelConfig:
        return ModelConfig(num_items, **self.teacher)

    def student_config(self, num_items: int) -> ModelConfig:
        shape = self.shape
        if shape is not None and shape.num_items != num_items:
            try:
                shape = FactorizedShape(shape.item_factors, shape.dim_factors, shape.rank,
                                        shape.stp_divisor, num_items, shape.embed_dim)
            except ValueError as exc:
                raise ConfigError(f"[compress] {exc}") from None
            _validate_shape(shape, self.mode)
        return ModelConfig(num_items, embedding_mode=self.mode, shape=shape, **self.teacher)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.read_dict(self.raw)
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def _validate_shape(shape: FactorizedShape, mode: Mode) -> None:
    try:
        shape.validate(mode)
    except ValueError as exc:
        raise ConfigError(f"[compress] {exc}") from None


def _get(sections: dict, section: str, key: str, conv, default=None):
    text = sections.get(section, {}).get(key)
    if text is None:
        if default is None:
            raise ConfigError(f"[{section}] {key}: missing")
        text = default
    try:
        return conv(text)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("none", "") else int(text)


def merge(*layers: dict) -> dict:
    out: dict[str, dict[str, str]] = {}
    for layer in layers:
        for sec, values in layer.items():
            out.setdefault(sec, {}).update({k: str(v) for k, v in values.items()})
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict[str, dict[str, str]] = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if key:
            out.setdefault(section, {})[key] = value
    return out


def read_ini(path: str | Path) -> dict:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def build(sections: dict) -> RunConfig:
    """Validate a merged section dict into a RunConfig (errors name the field)."""
    g = lambda s, k, conv, d=None: _get(sections, s, k, conv, d)  # noqa: E731
    num_items = g("data", "num_items", _optional_int, "none")
    teacher = {
        "embed_dim": g("model", "embed_dim", int, "128"),
        "max_seq_len": g("model", "max_seq_len", int, "50"),
        "num_layers": g("model", "num_layers", int, "1"),
        "num_heads": g("model", "num_heads", int, "1"),
        "dropout": g("model", "dropout", float, "0.5"),
    }
    try:
        ModelConfig(num_items or 1, **teacher)
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None

    try:
        mode = Mode(g("compress", "mode", str, "sttd"))
    except ValueError:
        raise ConfigError(f"[compress] mode: expected one of dense/ttd/sttd, "
                          f"got {sections['compress']['mode']!r}") from None
    shape = None
    if mode is not Mode.DENSE:
        args = (g("compress", "item_factors", _ints), g("compress", "dim_factors", _ints),
                g("compress", "rank", int), g("compress", "stp_divisor", int, "1"))
        try:
            shape = FactorizedShape(*args, num_items, teacher["embed_dim"])
        except ValueError as exc:
            raise ConfigError(f"[compress] {exc}") from None
        _validate_shape(shape, mode)

    try:
        kd = KDConfig(
            beta1=g("kd", "beta1", float, "0.1"), beta2=g("kd", "beta2", float, "0.001"),
            beta3=g("kd", "beta3", float, "0.8"), tau=g("kd", "tau", float, "0.2"),
            hot_fraction=g("kd", "hot_fraction", float, "0.2"),
            batch_size=g("train", "batch_size", int, "100"),
            epochs=g("train", "epochs", int, "30"),
            lr=g("kd", "lr", float, sections.get("train", {}).get("lr", "0.001")),
            weight_decay=g("train", "weight_decay", float, "1e-5"),
            patience=g("kd", "patience", _optional_int,
                       sections.get("train", {}).get("patience", "3")))
    except ValueError as exc:
        field_name = str(exc).split(":")[0]
        section = "train" if field_name in ("batch_size", "epochs", "weight_decay") else "kd"
        if field_name in ("lr", "patience") and field_name not in sections.get("kd", {}):
            section = "train"
        raise ConfigError(f"[{section}] {exc}") from None
    if kd.weight_decay < 0:
        raise ConfigError(f"[train] weight_decay: must be non-negative, got {kd.weight_decay}")

    data = {
        "delimiter": g("data", "delimiter", str, ","),
        "min_item_count": g("data", "min_item_count", int, "5"),
        "val_fraction": g("data", "val_fraction", float, "0.1"),
    }
    if not 0 <= data["val_fraction"] < 1:
        raise ConfigError(f"[data] val_fraction: must be in [0, 1), got {data['val_fraction']}")
    if data["min_item_count"] < 1:
        raise ConfigError(f"[data] min_item_count: must be >= 1, got {data['min_item_count']}")
    if "synth_sessions" in sections.get("data", {}):
        data.update(
            synth_sessions=g("data", "synth_sessions", int),
            synth_length=(g("data", "synth_min_len", int, "3"), g("data", "synth_max_len", int, "10")),
            synth_sharpness=g("data", "synth_sharpness", float, "1.0"),
            synth_cyclic=g("data", "synth_cyclic", _bool, "false"),
            synth_skew=g("data", "synth_skew", float, "1.2"),
            synth_branching=g("data", "synth_branching", int, "4"),
        )
    lr = g("train", "lr", float, "0.001")
    patience = g("train", "patience", _optional_int, "3")
    if lr <= 0:
        raise ConfigError(f"[train] lr: must be positive, got {lr}")
    if patience is not None and patience < 1:
        raise ConfigError(f"[train] patience: must be >= 1, got {patience}")
    return RunConfig(num_items, teacher, shape, mode, kd, lr, kd.batch_size, kd.weight_decay,
                     kd.epochs, patience, g("run", "seed", int, "0"),
                     Path(g("run", "out", str, "runs")), data, sections)


def load_config(path: str | Path | None = None, preset: str | None = "synthetic",
                overrides: dict | None = None, environ=None) -> RunConfig:
    """Preset, then file, then environment, then explicit overrides."""
    layers = []
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown {preset!r}, choose from {sorted(PRESETS)}")
        layers.append(PRESETS[preset])
    if path is not None:
        layers.append(read_ini(path))
    layers.append(env_overrides(environ))
    if overrides:
        layers.append(overrides)
    return build(merge(*layers))
