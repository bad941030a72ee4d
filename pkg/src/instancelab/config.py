"""Run configuration: TOML parsing, defaults, and model construction."""

from __future__ import annotations

import dataclasses
import importlib.resources
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .env import PomdpModel, build_bandit, build_gated_corridor
from .errors import UsageError
from .iape import TrainConfig

MODEL_DEFAULTS = {
    "bandit": {"kind": "bandit", "p_hi": 0.9, "p_lo": 0.1, "num_actions": 4,
               "horizon": 10, "discount": 0.9},
    "corridor": {"kind": "corridor", "length": 8, "hazard_prob": 0.35,
                 "num_modalities": 3, "horizon": 20, "discount": 0.9},
}

EVAL_DEFAULTS = {
    "test_pool_seed": 5000,
    "test_pool_size": 64,
    "episodes_per_instance": 1,
    "signature_episodes": 1,
    "signature_seed": 77,
}

VERIFY_DEFAULTS = {
    "n_instances": 10_000,
    "n_sets": 2000,
    "n_seeds": 200,
}


@dataclasses.dataclass
class RunConfig:
    seed: int
    workers: int
    model: dict
    train: TrainConfig
    eval: dict
    verify: dict

    def build_model(self) -> PomdpModel:
        m = self.model
        if m["kind"] == "bandit":
            return build_bandit(m["p_hi"], m["p_lo"], m["num_actions"],
                                m["horizon"], m["discount"])
        if m["kind"] == "corridor":
            return build_gated_corridor(m["length"], m["hazard_prob"],
                                        m["num_modalities"], m["horizon"],
                                        m["discount"])
        raise UsageError(f"unknown model kind {m['kind']!r}")

    def to_dict(self) -> dict:
        return {
            "run": {"seed": self.seed, "workers": self.workers},
            "model": dict(self.model),
            "train": dataclasses.asdict(self.train),
            "eval": dict(self.eval),
            "verify": dict(self.verify),
        }


def default_config() -> RunConfig:
    return RunConfig(seed=1, workers=1, model=dict(MODEL_DEFAULTS["corridor"]),
                     train=TrainConfig(), eval=dict(EVAL_DEFAULTS),
                     verify=dict(VERIFY_DEFAULTS))


def _take(section: dict, defaults: dict, where: str) -> dict:
    out = dict(defaults)
    for key, value in section.items():
        if key not in defaults and key != "kind":
            raise UsageError(f"unknown key {key!r} in [{where}]")
        out[key] = value
    return out


def config_from_dict(doc: dict) -> RunConfig:
    for section in doc:
        if section not in ("run", "model", "train", "eval", "verify"):
            raise UsageError(f"unknown config section [{section}]")
    run = doc.get("run", {})
    seed = int(run.get("seed", 1))
    workers = int(run.get("workers", 1))
    if workers < 1:
        raise UsageError("workers must be >= 1")

    model_sec = dict(doc.get("model", {}))
    kind = model_sec.get("kind", "corridor")
    if kind not in MODEL_DEFAULTS:
        raise UsageError(f"unknown model kind {kind!r}")
    model = _take(model_sec, MODEL_DEFAULTS[kind], "model")

    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    train_sec = doc.get("train", {})
    kwargs = {}
    for key, value in train_sec.items():
        if key not in train_fields:
            raise UsageError(f"unknown key {key!r} in [train]")
        if key == "gamma" and value == "auto":
            value = None
        kwargs[key] = value
    train = TrainConfig(**kwargs)
    if "seed" not in train_sec:
        train.seed = seed
    train.validate()

    return RunConfig(
        seed=seed, workers=workers, model=model, train=train,
        eval=_take(doc.get("eval", {}), EVAL_DEFAULTS, "eval"),
        verify=_take(doc.get("verify", {}), VERIFY_DEFAULTS, "verify"))


def load_config(path_or_preset: Optional[str]) -> RunConfig:
    """Load TOML config from a path, a packaged preset name, or defaults."""
    if path_or_preset is None:
        return default_config()
    path = Path(path_or_preset)
    if path.exists():
        text = path.read_bytes()
    else:
        name = path_or_preset.removesuffix(".toml") + ".toml"
        ref = importlib.resources.files("instancelab").joinpath("presets", name)
        if not ref.is_file():
            raise UsageError(f"config {path_or_preset!r} is neither a file "
                             "nor a packaged preset")
        text = ref.read_bytes()
    try:
        doc = tomllib.loads(text.decode("utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"config parse error: {e}") from None
    return config_from_dict(doc)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if v is None:
        return '"auto"'
    return repr(v)


def dump_defaults() -> str:
    """Default configuration as TOML text (gamma 'auto' means model discount)."""
    cfg = default_config()
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)
