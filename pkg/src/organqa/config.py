"""Use-case and experiment configuration, with YAML round-tripping."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional

import yaml

from .corrupt import NoiseSpec
from .nets import NetKind, NetworkSpec
from .phantom import KIDNEY_ORGANS, LAYOUT_LR_PAIRS, PELVIS_ORGANS, Layout
from .voxelgrid import Spacing

# Accuracy thresholds on true Dice; below the threshold means inaccurate.
PELVIS_THRESHOLDS = {
    "bladder": 0.86,
    "femoral_head_left": 0.92,
    "femoral_head_right": 0.92,
    "penile_bulb": 0.51,
    "prostate": 0.70,
    "rectum": 0.78,
    "urethra": 0.28,
}
KIDNEY_THRESHOLDS = {"kidney_left": 0.93, "kidney_right": 0.93}

# Hand-tuned on 32^3 phantoms at 3 mm so that signed Dice of corrupted
# ground truth spreads over [-1, 1]; see ``corrupt.calibration_histogram``.
PELVIS_DESK_NOISE = {
    "bladder": NoiseSpec(3, 1, 20, "foreground"),
    "femoral_head_left": NoiseSpec(3, 1, 16, "foreground"),
    "femoral_head_right": NoiseSpec(3, 1, 16, "foreground"),
    "penile_bulb": NoiseSpec(3, 1, 8, "foreground"),
    "prostate": NoiseSpec(6, 1, 10, "foreground"),
    "rectum": NoiseSpec(6, 1, 20, "foreground"),
    "urethra": NoiseSpec(6, 1, 10, "foreground"),
}
KIDNEY_DESK_NOISE = {
    "kidney_left": NoiseSpec(6, 1, 12, "foreground"),
    "kidney_right": NoiseSpec(6, 1, 12, "foreground"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    max_epochs: int = 200
    patience: int = 50
    seed: int = 0
    lr: float = 1e-3
    flip_augment: bool = False


@dataclass(frozen=True)
class UseCaseConfig:
    organs: tuple[str, ...]
    spacing: Spacing
    size: tuple[int, int, int]
    noise: dict
    thresholds: dict
    network: NetworkSpec
    crop_size: Optional[tuple[int, int, int]] = None
    train: TrainConfig = TrainConfig()
    flip_axis: str = "x"
    flip_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "organs", tuple(self.organs))
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        if self.crop_size is not None:
            object.__setattr__(self, "crop_size", tuple(int(v) for v in self.crop_size))
        object.__setattr__(self, "flip_pairs", tuple(tuple(p) for p in self.flip_pairs))
        missing = [o for o in self.organs if o not in self.noise]
        if missing:
            raise ConfigError(f"no noise spec for {missing}")
        for organ, t in self.thresholds.items():
            if not 0.0 < t < 1.0:
                raise ConfigError(f"threshold for {organ} must lie in (0, 1), got {t}")
        if len(set(self.organs)) != len(self.organs):
            raise ConfigError("organ names must be unique")
        if self.network.kind is not NetKind.VAE_SINGLE:
            if not self.network.in_channels == self.network.out_channels == len(self.organs):
                raise ConfigError(
                    f"network in/out channels ({self.network.in_channels}/{self.network.out_channels}) "
                    f"must equal the organ count {len(self.organs)}")

    @property
    def model_dims(self) -> tuple[int, int, int]:
        return self.crop_size if self.crop_size is not None else self.size

    def with_network(self, network: NetworkSpec) -> "UseCaseConfig":
        return replace(self, network=network)

    def to_dict(self) -> dict:
        return {
            "organs": list(self.organs),
            "spacing": list(self.spacing),
            "size": list(self.size),
            "crop_size": None if self.crop_size is None else list(self.crop_size),
            "noise": {o: self.noise[o].to_dict() for o in self.organs},
            "thresholds": {o: float(t) for o, t in self.thresholds.items()},
            "network": self.network.to_dict(),
            "train": dict(vars(self.train)),
            "flip_axis": self.flip_axis,
            "flip_pairs": [list(p) for p in self.flip_pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UseCaseConfig":
        try:
            d = dict(d)
            d["noise"] = {o: NoiseSpec.from_dict(v) for o, v in d["noise"].items()}
            d["network"] = NetworkSpec.from_dict(d["network"])
            d["train"] = TrainConfig(**d.get("train", {}))
            return cls(**d)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid use_case section: {exc}") from None


def pelvis_desk_config(**train) -> UseCaseConfig:
    """32^3 pelvis-like setup used by the desk-scale runs."""
    return UseCaseConfig(
        organs=PELVIS_ORGANS,
        spacing=(3.0, 3.0, 3.0),
        size=(32, 32, 32),
        noise=dict(PELVIS_DESK_NOISE),
        thresholds=dict(PELVIS_THRESHOLDS),
        network=NetworkSpec(NetKind.DAE, 7, 7, (8, 16, 32), (2, 2), num_res_units=2),
        train=TrainConfig(**train),
        flip_pairs=LAYOUT_LR_PAIRS[Layout.PELVIS_LIKE7],
    )


def kidney_desk_config(**train) -> UseCaseConfig:
    return UseCaseConfig(
        organs=KIDNEY_ORGANS,
        spacing=(3.0, 3.0, 6.0),
        size=(32, 32, 16),
        noise=dict(KIDNEY_DESK_NOISE),
        thresholds=dict(KIDNEY_THRESHOLDS),
        network=NetworkSpec(NetKind.DAE, 2, 2, (8, 16, 32), (2, 2), num_res_units=2),
        train=TrainConfig(**train),
        flip_pairs=LAYOUT_LR_PAIRS[Layout.KIDNEY_LIKE2],
    )


def mr_pelvis_config() -> UseCaseConfig:
    """Full-scale MR pelvis geometry (1.5 mm isotropic, 336x336x240)."""
    from .nets import table2_dae

    return UseCaseConfig(
        organs=PELVIS_ORGANS,
        spacing=(1.5, 1.5, 1.5),
        size=(336, 336, 240),
        noise=dict(PELVIS_DESK_NOISE),
        thresholds=dict(PELVIS_THRESHOLDS),
        network=table2_dae(7),
        flip_pairs=LAYOUT_LR_PAIRS[Layout.PELVIS_LIKE7],
    )


def ct_kidney_config() -> UseCaseConfig:
    """Full-scale CT kidney geometry with the foreground-centered crop."""
    from .nets import table2_dae

    return UseCaseConfig(
        organs=KIDNEY_ORGANS,
        spacing=(1.0, 1.0, 3.0),
        size=(700, 700, 620),
        crop_size=(272, 160, 80),
        noise=dict(KIDNEY_DESK_NOISE),
        thresholds=dict(KIDNEY_THRESHOLDS),
        network=table2_dae(2),
        flip_pairs=LAYOUT_LR_PAIRS[Layout.KIDNEY_LIKE2],
    )


@dataclass(frozen=True)
class DatasetConfig:
    layout: Layout = Layout.PELVIS_LIKE7
    n_train: int = 16
    n_val: int = 4
    n_test: int = 100
    degraded_fraction: float = 0.3
    seed: int = 0
    jitter: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    use_case: UseCaseConfig
    dataset: DatasetConfig = DatasetConfig()
    data_dir: str = "data"
    out_dir: str = "out"
    methods: tuple[str, ...] = ("dae", "statistical")
    networks: dict = field(default_factory=dict)
    bootstrap: BootstrapConfig = BootstrapConfig()

    def network_for(self, method: str) -> NetworkSpec:
        """Network spec for a neural method; ``use_case.network`` for ``dae``."""
        key = method.replace("-", "_")
        if key == "dae":
            return self.use_case.network
        if key in self.networks:
            return self.networks[key]
        n = len(self.use_case.organs)
        if key == "vae_single":
            return NetworkSpec(NetKind.VAE_SINGLE, 1, 1, (8, 16, 16), (2, 2, 1), latent_size=10)
        if key == "vae_multi":
            return NetworkSpec(NetKind.VAE_MULTI, n, n, (8, 16, 32), (2, 2, 1), latent_size=100)
        raise ConfigError(f"no network for method {method!r}")

    def to_dict(self) -> dict:
        return {
            "use_case": self.use_case.to_dict(),
            "dataset": {**vars(self.dataset), "layout": self.dataset.layout.value},
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "methods": list(self.methods),
            "networks": {k: v.to_dict() for k, v in self.networks.items()},
            "bootstrap": dict(vars(self.bootstrap)),
        }

    @classmethod
    def from_dict(cls, d: dict, env=None) -> "ExperimentConfig":
        env = os.environ if env is None else env
        if not isinstance(d, dict) or "use_case" not in d:
            raise ConfigError("config needs a 'use_case' section")
        try:
            cfg = cls(
                use_case=UseCaseConfig.from_dict(d["use_case"]),
                dataset=DatasetConfig(**d.get("dataset", {})),
                data_dir=str(d.get("data_dir", "data")),
                out_dir=str(env.get("OUT_DIR") or d.get("out_dir", "out")),
                methods=tuple(d.get("methods", ("dae", "statistical"))),
                networks={k: NetworkSpec.from_dict(v) for k, v in d.get("networks", {}).items()},
                bootstrap=BootstrapConfig(**d.get("bootstrap", {})),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        organs = set(cfg.use_case.organs)
        from .phantom import LAYOUT_ORGANS

        if set(LAYOUT_ORGANS[cfg.dataset.layout]) != organs:
            raise ConfigError("dataset layout organs do not match use_case.organs")
        if set(cfg.use_case.thresholds) != organs:
            raise ConfigError("thresholds must list exactly the configured organs")
        return cfg


def load_config(path, env=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw, env)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
