"""Run configuration: strict JSON schema with unknown-key rejection, and a
canonical snapshot form that reproduces a run bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import LabelMap, SynthSpec, preset_spec
from .errors import ConfigError
from .losses import Objective
from .model import ModalityMode, ModelConfig
from .optim import OptimConfig

CLASS_WEIGHTING_MODES = ("inverse_frequency", "none")


def _check_keys(obj: dict, allowed: set[str], required: set[str], context: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"{context}: missing required keys {sorted(missing)}")


@dataclass
class LossSpec:
    """Declarative loss section; class weights are resolved from the train split."""

    objective: Objective = Objective.MLCS
    alpha: float = 2.0
    tau: float = 0.1
    class_weighting: str = "inverse_frequency"

    def __post_init__(self):
        try:
            self.objective = Objective(self.objective)
        except ValueError:
            raise ConfigError(
                f"unknown objective {self.objective!r}; choose from "
                f"{[o.value for o in Objective]}"
            ) from None
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.class_weighting not in CLASS_WEIGHTING_MODES:
            raise ConfigError(
                f"class_weighting must be one of {CLASS_WEIGHTING_MODES}"
            )

    def to_json_dict(self) -> dict:
        return {
            "objective": self.objective.value,
            "alpha": self.alpha,
            "tau": self.tau,
            "class_weighting": self.class_weighting,
        }


@dataclass
class DataSpec:
    """Exactly one source: an existing manifest, an inline synth spec, or a preset."""

    manifest: Optional[str] = None
    synth: Optional[SynthSpec] = None
    preset: Optional[str] = None
    preset_overrides: dict = field(default_factory=dict)
    cache_dir: Optional[str] = None  # where generated datasets land

    def __post_init__(self):
        sources = [s is not None for s in (self.manifest, self.synth, self.preset)]
        if sum(sources) != 1:
            raise ConfigError("data section needs exactly one of manifest / synth / preset")
        if self.preset_overrides and self.preset is None:
            raise ConfigError("preset_overrides requires a preset")

    def to_json_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.manifest is not None:
            out["manifest"] = self.manifest
        if self.synth is not None:
            out["synth"] = self.synth.to_json_dict()
        if self.preset is not None:
            out["preset"] = self.preset
            if self.preset_overrides:
                out["preset_overrides"] = self.preset_overrides
        if self.cache_dir is not None:
            out["cache_dir"] = self.cache_dir
        return out


@dataclass
class RunConfig:
    model: ModelConfig
    optim: OptimConfig
    loss: LossSpec
    data: DataSpec
    output_dir: str
    seed: int = 0
    label_map: Optional[LabelMap] = None
    eval_splits: tuple[str, ...] = ("test",)

    def __post_init__(self):
        if self.label_map is not None and len(self.label_map) != self.model.num_classes:
            raise ConfigError(
                f"label map has {len(self.label_map)} entries but the model "
                f"declares {self.model.num_classes} classes"
            )

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "model": {
                "speech_feat_dim": self.model.speech_feat_dim,
                "text_feat_dim": self.model.text_feat_dim,
                "num_classes": self.model.num_classes,
                "hidden": self.model.hidden,
                "attention_heads": self.model.attention_heads,
                "csl_dim": self.model.csl_dim,
                "modality_mode": self.model.modality_mode.value,
                "encoder_stub": self.model.encoder_stub,
            },
            "optim": {
                "lr_main": self.optim.lr_main,
                "lr_encoder": self.optim.lr_encoder,
                "beta1": self.optim.beta1,
                "beta2": self.optim.beta2,
                "eps": self.optim.eps,
                "weight_decay": self.optim.weight_decay,
                "epochs": self.optim.epochs,
                "batch_size": self.optim.batch_size,
                "grad_accum": self.optim.grad_accum,
                "eta_min": self.optim.eta_min,
            },
            "loss": self.loss.to_json_dict(),
            "data": self.data.to_json_dict(),
            "label_map": list(self.label_map.names) if self.label_map else None,
            "eval_splits": list(self.eval_splits),
        }


_MODEL_KEYS = {
    "speech_feat_dim",
    "text_feat_dim",
    "num_classes",
    "hidden",
    "attention_heads",
    "csl_dim",
    "modality_mode",
    "encoder_stub",
}
_OPTIM_KEYS = {
    "lr_main",
    "lr_encoder",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "epochs",
    "batch_size",
    "grad_accum",
    "eta_min",
}
_LOSS_KEYS = {"objective", "alpha", "tau", "class_weighting"}
_DATA_KEYS = {"manifest", "synth", "preset", "preset_overrides", "cache_dir"}
_TOP_KEYS = {"seed", "output_dir", "model", "optim", "loss", "data", "label_map", "eval_splits"}


def run_config_from_dict(obj: dict) -> RunConfig:
    _check_keys(obj, _TOP_KEYS, {"model", "data", "output_dir"}, "config")

    model_obj = obj["model"]
    _check_keys(model_obj, _MODEL_KEYS,
                {"speech_feat_dim", "text_feat_dim", "num_classes"}, "config.model")
    try:
        model = ModelConfig(**model_obj)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config.model: {e}") from e

    optim_obj = obj.get("optim", {})
    _check_keys(optim_obj, _OPTIM_KEYS, set(), "config.optim")
    optim = OptimConfig(**optim_obj)

    loss_obj = obj.get("loss", {})
    _check_keys(loss_obj, _LOSS_KEYS, set(), "config.loss")
    loss = LossSpec(**loss_obj)

    data_obj = obj["data"]
    _check_keys(data_obj, _DATA_KEYS, set(), "config.data")
    data_kwargs = dict(data_obj)
    if "synth" in data_kwargs and data_kwargs["synth"] is not None:
        data_kwargs["synth"] = SynthSpec.from_json_dict(data_kwargs["synth"])
    data = DataSpec(**data_kwargs)

    label_map = None
    if obj.get("label_map") is not None:
        names = obj["label_map"]
        if not isinstance(names, (list, tuple)) or not all(isinstance(n, str) for n in names):
            raise ConfigError("label_map must be a list of strings")
        label_map = LabelMap(tuple(names))

    eval_splits = tuple(obj.get("eval_splits", ["test"]))
    for s in eval_splits:
        if s not in ("train", "dev", "test"):
            raise ConfigError(f"unknown eval split {s!r}")

    seed = obj.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    return RunConfig(
        model=model,
        optim=optim,
        loss=loss,
        data=data,
        output_dir=str(obj["output_dir"]),
        seed=seed,
        label_map=label_map,
        eval_splits=eval_splits,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return run_config_from_dict(obj)


def resolve_synth_spec(data: DataSpec, seed: int) -> Optional[SynthSpec]:
    """Materialize the generator spec for synth/preset data sections."""
    if data.synth is not None:
        return data.synth
    if data.preset is not None:
        overrides = dict(data.preset_overrides)
        overrides.setdefault("seed", seed)
        num_classes = overrides.pop("num_classes", 4)
        return preset_spec(data.preset, num_classes=num_classes, **overrides)
    return None
