"""Flat dotted-key run configuration.

A config file is TOML restricted to ``section.name = value`` pairs. It is
layered over ``default_config.toml``; unknown keys are rejected and every
section is re-validated through the owning module's dataclass.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bbox import BBoxGrid
from .data import SynthConfig
from .errors import ConfigError
from .model import NetworkConfig, bbox_head
from .nn import LayerSpec
from .trainer import ExperimentConfig, NMSParams, TrainConfig


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _parse(text: str, source: str) -> dict:
    try:
        return _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def default_values() -> dict:
    text = resources.files(__package__).joinpath("default_config.toml").read_text()
    return _parse(text, "default_config.toml")


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig
    grid: BBoxGrid
    network: NetworkConfig
    train: TrainConfig
    nms: NMSParams
    iou_match_threshold: float
    experiment: ExperimentConfig
    values: dict

    def network_for(self, head) -> NetworkConfig:
        return replace(self.network, head=head)


def _section(values: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


def build_run_config(values: dict) -> RunConfig:
    try:
        data = _section(values, "data")
        synth = SynthConfig(**data)
        g = _section(values, "grid")
        grid = BBoxGrid(nx=g["nx"], ny=g["ny"], ns=g["ns"], na=g["na"], scale_range=tuple(g["scale_range"]),
                        aspect_range=tuple(g["aspect_range"]), sigma=tuple(g["sigma"]))
        m = _section(values, "model")
        network = NetworkConfig(
            input_dims=(3, synth.image_size, synth.image_size),
            trunk=tuple(LayerSpec.from_dict(s) for s in m["trunk"]),
            feature_dim=m["feature_dim"],
            head=bbox_head(grid),
            init_seed=m["init_seed"],
            init_std=m["init_std"],
            init_scheme=m["init_scheme"],
        )
        t = _section(values, "train")
        t["held_out_classes"] = tuple(t["held_out_classes"])
        train = TrainConfig(**t)
        nms = NMSParams(**_section(values, "nms"))
        if not (0 <= nms.iou_threshold <= 1 and 0 <= nms.score_threshold <= 1 and nms.max_detections >= 1):
            raise ConfigError(f"invalid nms parameters: {nms}")
        match = float(values["eval.iou_match_threshold"])
        if not 0 < match <= 1:
            raise ConfigError(f"eval.iou_match_threshold must lie in (0, 1], got {match}")
        e = _section(values, "experiment")
        experiment = ExperimentConfig(
            network=network,
            classify=replace(train, epochs=e["classify_epochs"], held_out_classes=()),
            detect=replace(train, epochs=e["detect_epochs"], held_out_classes=()),
            held_out_classes=tuple(e["held_out_classes"]),
            seeds=tuple(e["seeds"]),
            nms=nms,
            iou_match_threshold=match,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return RunConfig(synth, grid, network, train, nms, match, experiment, dict(values))


def load_run_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (dotted keys)."""
    values = default_values()
    layers = []
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        layers.append((str(path), _parse(text, str(path))))
    if overrides:
        layers.append(("overrides", dict(overrides)))
    for source, layer in layers:
        unknown = sorted(set(layer) - set(values))
        if unknown:
            raise ConfigError(f"{source}: unknown config key {unknown[0]!r}")
        values.update(layer)
    return build_run_config(values)
