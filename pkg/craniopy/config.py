"""Run configuration: presets, flat JSON config files and validation."""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import torch
import voluptuous as vol

from .errors import ConfigError
from .models import PatchConfig, TripletConfig, View

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "default"


@dataclass
class RunConfig:
    # graph construction
    half_size: int = 32
    d_feat: int = 128
    k: int = 4
    normalize_coords: bool = True
    feature_mode: str = "ingested"
    views: List[str] = field(default_factory=lambda: [v.value for v in View])
    # encoder
    hidden: int = 128
    d_embed: int = 128
    d_g: int = 128
    gcn_layers: int = 2
    relu_last: bool = True
    # cross-attention
    heads: int = 4
    ffn_mult: int = 4
    use_layer_norm: bool = True
    use_ca: bool = True
    # transport
    use_ot: bool = True
    envelope: bool = False
    epsilon: float = 0.1
    sinkhorn_iters: int = 80
    sinkhorn_tol: Optional[float] = None
    # objective and optimiser
    margin: float = 0.3
    beta: float = 0.5
    lambda_ot: float = 0.1
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 50
    seed: int = 0
    dtype: str = "float32"
    # data and outputs
    train: List[str] = field(default_factory=list)
    val: List[str] = field(default_factory=list)
    out_dir: str = "runs/latest"
    ks: List[int] = field(default_factory=lambda: [1, 5, 10, 20])

    @property
    def d(self) -> int:
        """Token dimension d_embed + d_g."""
        return self.d_embed + self.d_g

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(half_size=self.half_size, d_feat=self.d_feat)

    @property
    def triplet(self) -> TripletConfig:
        return TripletConfig(
            margin=self.margin,
            beta=self.beta,
            lambda_ot=self.lambda_ot,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            epsilon=self.epsilon,
            sinkhorn_iters=self.sinkhorn_iters,
            seed=self.seed,
        )

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def ot_active(self) -> bool:
        """Whether the transport module contributes to similarity or loss."""
        return self.use_ot and (self.beta < 1.0 or self.lambda_ot > 0.0)

    @property
    def view_set(self) -> List[View]:
        return [View(v) for v in self.views]

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return build_config({**self.to_dict(), **changes})


def _positive_int():
    return vol.All(vol.Coerce(int), vol.Range(min=1))


def _positive_float():
    return vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))


CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("half_size"): _positive_int(),
        vol.Optional("d_feat"): _positive_int(),
        vol.Optional("k"): _positive_int(),
        vol.Optional("normalize_coords"): vol.Boolean(),
        vol.Optional("feature_mode"): vol.In(["ingested", "toy"]),
        vol.Optional("views"): vol.All([vol.In([v.value for v in View])], vol.Length(min=1)),
        vol.Optional("hidden"): _positive_int(),
        vol.Optional("d_embed"): _positive_int(),
        vol.Optional("d_g"): _positive_int(),
        vol.Optional("gcn_layers"): _positive_int(),
        vol.Optional("relu_last"): vol.Boolean(),
        vol.Optional("heads"): _positive_int(),
        vol.Optional("ffn_mult"): _positive_int(),
        vol.Optional("use_layer_norm"): vol.Boolean(),
        vol.Optional("use_ca"): vol.Boolean(),
        vol.Optional("use_ot"): vol.Boolean(),
        vol.Optional("envelope"): vol.Boolean(),
        vol.Optional("epsilon"): _positive_float(),
        vol.Optional("sinkhorn_iters"): _positive_int(),
        vol.Optional("sinkhorn_tol"): vol.Any(None, _positive_float()),
        vol.Optional("margin"): _positive_float(),
        vol.Optional("beta"): vol.All(vol.Coerce(float), vol.Range(min=0, max=1)),
        vol.Optional("lambda_ot"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Optional("batch_size"): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("learning_rate"): _positive_float(),
        vol.Optional("weight_decay"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Optional("epochs"): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("seed"): vol.Coerce(int),
        vol.Optional("dtype"): vol.In(["float32", "float64"]),
        vol.Optional("train"): [vol.IsFile()],
        vol.Optional("val"): [vol.IsFile()],
        vol.Optional("out_dir"): str,
        vol.Optional("ks"): vol.All([_positive_int()], vol.Length(min=1)),
    },
    extra=vol.PREVENT_EXTRA,
)


# Named presets; each maps to overrides of the RunConfig defaults.
RUN_PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    "s2f-front": {"views": ["front"]},
    "s2f-side": {"views": ["side"]},
    # canonical gradient-check instance
    "tiny": {
        "half_size": 2,
        "d_feat": 4,
        "k": 1,
        "hidden": 4,
        "d_embed": 4,
        "d_g": 2,
        "heads": 2,
        "sinkhorn_iters": 10,
        "batch_size": 2,
        "dtype": "float64",
    },
}


def build_config(values: Mapping[str, Any]) -> RunConfig:
    """Validate a flat mapping and build a RunConfig."""
    try:
        validated = CONFIG_SCHEMA(dict(values))
    except vol.MultipleInvalid as e:
        raise ConfigError(f"invalid configuration: {e}") from e

    config = RunConfig(**validated)
    if config.d % config.heads != 0:
        raise ConfigError(
            f"token dim d_embed + d_g = {config.d} is not divisible by heads = {config.heads}"
        )
    return config


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    nested = [key for key, value in data.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"config file {path} must be flat; nested keys: {nested}")
    return data


def resolve_config(
    preset: str = DEFAULT_PRESET,
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Preset, then config file, then explicit overrides (None values ignored)."""
    if preset not in RUN_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available presets: {list(RUN_PRESETS.keys())}")
    values: Dict[str, Any] = dict(RUN_PRESETS[preset])
    if config_path is not None:
        values.update(load_config_file(config_path))
    if overrides:
        values.update({key: value for key, value in overrides.items() if value is not None})
    config = build_config(values)
    logger.debug(f"Resolved configuration (preset {preset}): {config.to_dict()}")
    return config
