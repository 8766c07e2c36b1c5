"""Flat ``key = value`` run configuration with command-line overrides.

Every key, its type and its default is listed in :data:`SCHEMA`; unknown keys
are rejected. Lists are comma separated, HU windows are ``lo:hi`` pairs.
"""

from __future__ import annotations

from pathlib import Path

from .data import TRANSFORMS, AugmentRanges, HUWindowSpec
from .errors import ConfigError
from .model import ArchitectureSpec
from .optim import CROSS_ENTROPY, MSE, TrainingConfig


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in str(v).split(",") if x.strip())


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _strs(v: str) -> tuple:
    return tuple(x.strip() for x in str(v).split(",") if x.strip())


def _windows(v: str) -> tuple:
    out = []
    for part in str(v).split(","):
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"HU window {part!r} must be lo:hi")
        out.append((float(lo), float(hi)))
    return tuple(out)


# key: (parser, default, description)
SCHEMA = {
    "seed": (int, "0", "single source of randomness for every stage"),
    "data": (str, "", "patch store directory (train/tune/crossval/evaluate)"),
    "dataset_dir": (str, "", "raw scan directory (extract)"),
    "out": (str, "out", "output directory"),
    "checkpoint": (str, "", "checkpoint path (evaluate/predict)"),
    # training
    "learning_rate": (float, "0.00001", "Adam step size"),
    "batch_size": (int, "32", "mini-batch size"),
    "epochs": (int, "50", "training epochs"),
    "loss": (str, CROSS_ENTROPY, f"{CROSS_ENTROPY} or {MSE}"),
    "validation_fraction": (float, "0.1", "stratified validation share of the training sources"),
    "adam_beta1": (float, "0.9", "Adam first-moment decay"),
    "adam_beta2": (float, "0.999", "Adam second-moment decay"),
    "adam_epsilon": (float, "1e-8", "Adam denominator offset"),
    # architecture
    "conv_filters": (_ints, "32,64,96,128", "filters per conv block"),
    "conv_kernels": (_ints, "7,5,3,3", "kernel size per conv block"),
    "dense_units": (_ints, "1024,512,256", "hidden dense layer widths"),
    "dropout": (_floats, "0.25,0.40,0.40", "dropout rate after each hidden dense layer"),
    "bn_before_activation": (_bool, "false", "Conv->BN->ReLU instead of Conv->ReLU->BN"),
    "bn_momentum": (float, "0.9", "batch-norm running-statistics momentum"),
    "bn_epsilon": (float, "1e-5", "batch-norm variance offset"),
    # preprocessing
    "hu_windows": (_windows, "-1400:-950,-1000:200,-160:240", "three HU windows, one per channel"),
    "patch_size": (int, "32", "grid cell size in pixels"),
    "coverage": (float, "0.80", "minimum fraction of a cell inside the ROI polygon"),
    "test_per_class": (int, "150", "held-out test sources per class"),
    # augmentation
    "augment": (_bool, "true", "expand training sources with augmented variants"),
    "augment_factor": (int, "7", "augmented variants per training source"),
    "transforms": (_strs, ",".join(TRANSFORMS), "transforms cycled through per source"),
    "keep_originals": (_bool, "false", "keep un-augmented sources next to their variants"),
    "interpolation": (str, "bilinear", "bilinear or nearest"),
    "max_shift": (int, "4", "translation range in pixels"),
    "max_rotation": (float, "15", "rotation range in degrees"),
    "scale_range": (_floats, "0.9,1.1", "zoom factor range"),
    "shading_range": (_floats, "0.8,1.2", "intensity factor range"),
    "crop_size": (int, "28", "crop side before resizing back to 32"),
    "max_shear": (float, "0.1", "affine shear range"),
    # evaluation protocol
    "k": (int, "5", "cross-validation folds"),
    "stratified": (_bool, "true", "stratify folds by class"),
    "tune_blocks": (_ints, "3,4,5", "conv block counts compared by tune"),
    "tune_losses": (_strs, f"{CROSS_ENTROPY},{MSE}", "loss objectives compared by tune"),
    # synthetic data
    "n_per_class": (int, "100", "synthetic samples per class"),
}


class RunConfig:
    """Parsed configuration; values are attributes, ``raw`` keeps the text."""

    def __init__(self, raw: dict[str, str] | None = None):
        raw = raw or {}
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        self.raw = {k: raw.get(k, default) for k, (_, default, _) in SCHEMA.items()}
        for key, (parse, _, _) in SCHEMA.items():
            try:
                setattr(self, key, parse(self.raw[key]))
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {self.raw[key]!r} ({e})") from None

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        raw: dict[str, str] = {}
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {p} not found")
            raw.update(parse_lines(p.read_text().splitlines(), str(p)))
        raw.update(parse_lines(overrides, "<command line>"))
        return cls(raw)

    def dump(self) -> str:
        """Resolved configuration as a key=value file (sorted keys)."""
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))

    # typed views

    def architecture(self, filters=None, kernels=None) -> ArchitectureSpec:
        filters = tuple(filters if filters is not None else self.conv_filters)
        kernels = tuple(kernels if kernels is not None else self.conv_kernels)
        if len(filters) != len(kernels):
            raise ConfigError(f"{len(filters)} conv filter counts but {len(kernels)} kernel sizes")
        spec = ArchitectureSpec(
            conv_blocks=tuple(zip(filters, kernels)),
            dense_units=self.dense_units,
            dropout_rates=self.dropout,
            bn_before_activation=self.bn_before_activation,
            bn_momentum=self.bn_momentum,
            bn_epsilon=self.bn_epsilon,
        )
        spec.validate()
        return spec

    def training(self, loss=None) -> TrainingConfig:
        tc = TrainingConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            loss=loss or self.loss,
            seed=self.seed,
            validation_fraction=self.validation_fraction,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            adam_epsilon=self.adam_epsilon,
        )
        tc.validate()
        return tc

    def hu_window_spec(self) -> HUWindowSpec:
        return HUWindowSpec(self.hu_windows)

    def augment_ranges(self) -> AugmentRanges:
        if len(self.scale_range) != 2 or len(self.shading_range) != 2:
            raise ConfigError("scale_range and shading_range take two values")
        return AugmentRanges(
            max_shift=self.max_shift,
            max_rotation_deg=self.max_rotation,
            scale=self.scale_range,
            shading=self.shading_range,
            crop_size=self.crop_size,
            max_shear=self.max_shear,
        )


def parse_lines(lines, source: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected key = value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def schema_text() -> str:
    """Documentation table of every key, default and meaning."""
    w = max(len(k) for k in SCHEMA)
    return "\n".join(f"{k:<{w}}  {d:<32} {h}" for k, (_, d, h) in SCHEMA.items()) + "\n"
