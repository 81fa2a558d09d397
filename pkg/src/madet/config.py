"""Flat `key = value` run configuration with eager validation.

Every tunable of the pipeline lives under a dotted key; unknown keys are
rejected. Command-line flags override file values. The helpers at the bottom
turn a RunConfig into the domain objects of the owning modules.
"""

from __future__ import annotations

import os

from . import detection, network, optimizer
from .errors import ConfigError
from .windowing import FoveationConfig, SamplingGrid, default_sampling_grid


def _int(lo=None, hi=None, odd=False):
    def parse(s: str):
        try:
            v = int(str(s).strip())
        except ValueError:
            raise ConfigError(f"expected an integer, got {s!r}") from None
        if lo is not None and v < lo:
            raise ConfigError(f"value {v} below minimum {lo}")
        if hi is not None and v > hi:
            raise ConfigError(f"value {v} above maximum {hi}")
        if odd and v % 2 == 0:
            raise ConfigError(f"value {v} must be odd")
        return v
    return parse


def _float(lo=None, hi=None, lo_open=False, hi_open=False):
    def parse(s: str):
        try:
            v = float(str(s).strip())
        except ValueError:
            raise ConfigError(f"expected a number, got {s!r}") from None
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise ConfigError(f"value {v} out of range (min {lo})")
        if hi is not None and (v >= hi if hi_open else v > hi):
            raise ConfigError(f"value {v} out of range (max {hi})")
        return v
    return parse


def _bool(s: str):
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _choice(*options):
    def parse(s: str):
        v = str(s).strip()
        if v not in options:
            raise ConfigError(f"expected one of {options}, got {s!r}")
        return v
    return parse


def _int_list(s: str):
    try:
        return tuple(int(p) for p in str(s).split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


def _float_list(s: str):
    try:
        return tuple(float(p) for p in str(s).split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}") from None


def _rings(s: str):
    v = str(s).strip()
    if v == "auto":
        return "auto"
    rings = []
    for part in v.split(","):
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(
                f"ring {part!r} must be start:end:block (e.g. 0:16:1)")
        try:
            rings.append((float(bits[0]), float(bits[1]), int(bits[2])))
        except ValueError:
            raise ConfigError(f"ring {part!r} has non-numeric fields") from None
    SamplingGrid(tuple(rings))  # validates contiguity etc.
    return tuple(rings)


def _str(s: str):
    return str(s).strip()


DEFAULTS: dict[str, tuple] = {
    "seed": (0, _int(lo=0)),
    "threads": (os.cpu_count() or 1, _int(lo=1)),
    "out": ("out", _str),

    "optimizer.epsilon0": (0.01, _float(lo=0, lo_open=True)),
    "optimizer.decay_f": (0.9995, _float(lo=0, hi=1, lo_open=True)),
    "optimizer.m_i": (0.5, _float(lo=0, hi=1, hi_open=True)),
    "optimizer.m_f": (0.99, _float(lo=0, hi=1, hi_open=True)),
    "optimizer.T": (20000, _int(lo=1)),
    "optimizer.max_norm_c": (3.0, _float(lo=0, lo_open=True)),
    "optimizer.batch_size": (128, _int(lo=1)),
    "optimizer.momentum_ramp": ("standard", _choice("standard", "paper")),

    "foveation.r0": (16.0, _float(lo=0)),
    "foveation.sigma_slope": (0.05, _float(lo=0)),
    "sampling.rings": ("auto", _rings),

    "network.input_side": (129, _int(lo=9, odd=True)),
    "network.maxout_k": (2, _int(lo=1)),
    "network.conv_maps": ((64, 64, 64), _int_list),
    "network.conv_filters": ((5, 5, 5), _int_list),
    "network.conv_strides": ((2, 1, 1), _int_list),
    "network.pool_extents": ((3, 3, 3), _int_list),
    "network.pool_strides": ((2, 2, 2), _int_list),
    "network.fc_units": (290, _int(lo=1)),
    "network.drop_profile": ((0.1, 0.2, 0.2, 0.5, 0.5), _float_list),

    "dataset.nonma_per_ma": (16.0, _float(lo=0, lo_open=True)),
    "dataset.hard_negative_fraction": (0.8, _float(lo=0, hi=1)),
    "dataset.ma_fraction": (0.25, _float(lo=0, hi=1, lo_open=True, hi_open=True)),
    "dataset.val_fraction": (0.2, _float(lo=0, hi=1, hi_open=True)),
    "dataset.augment": (True, _bool),
    "dataset.rotation_max_degrees": (0.0, _float(lo=0)),

    "synth.count": (10, _int(lo=0)),
    "synth.image_size": (192, _int(lo=48)),
    "synth.ma_count": (15, _int(lo=0)),
    "synth.vessel_count": (6, _int(lo=0)),
    "synth.hemorrhage_count": (2, _int(lo=0)),
    "synth.noise_level": (0.004, _float(lo=0)),

    "train.batches": (2000, _int(lo=1)),
    "train.eval_interval": (200, _int(lo=1)),
    "train.val_windows": (256, _int(lo=2)),

    "detect.prob_threshold": (0.5, _float(lo=0, hi=1, lo_open=True, hi_open=True)),
    "detect.max_area": (21, _int(lo=1)),
    "detect.min_convexity": (0.8, _float(lo=0, hi=1, lo_open=True)),
    "detect.kappa": (0.5, _float(lo=0)),
    "detect.prefilter_window": (31, _int(lo=3, odd=True)),
    "detect.mask_threshold": (0.06, _float(lo=0, hi=1, hi_open=True)),
    "detect.median_size": (5, _int(lo=1, odd=True)),
    "detect.erode_radius": (8, _int(lo=0)),
    "detect.batch_windows": (256, _int(lo=1)),

    "eval.froc_thresholds": (tuple(round(0.05 * k, 2) for k in range(1, 20)),
                             _float_list),
    "eval.min_regions_for_dr": (1, _int(lo=1)),
}


class RunConfig:
    """Validated flat configuration; behaves like a read-only mapping."""

    def __init__(self, values: dict | None = None):
        self._values = {k: d for k, (d, _) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        parse = DEFAULTS[key][1]
        self._values[key] = parse(raw) if isinstance(raw, str) else raw

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self._values[key]

    def dump(self) -> str:
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, tuple):
                if v and isinstance(v[0], tuple):  # sampling rings
                    return ",".join(f"{a:g}:{b:g}:{c}" for a, b, c in v)
                return ",".join(f"{x:g}" if isinstance(x, float) else str(x)
                                for x in v)
            return str(v)
        return "\n".join(f"{k} = {fmt(self._values[k])}"
                         for k in sorted(self._values)) + "\n"


def parse_config_file(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected `key = value`")
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for k, v in parse_config_file(path).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg


def network_from_config(cfg: RunConfig) -> network.NetworkSpec:
    maps = cfg["network.conv_maps"]
    filters = cfg["network.conv_filters"]
    cstrides = cfg["network.conv_strides"]
    pexts = cfg["network.pool_extents"]
    pstrides = cfg["network.pool_strides"]
    if not (len(maps) == len(filters) == len(cstrides) == len(pexts)
            == len(pstrides)):
        raise ConfigError("network.conv_* and network.pool_* lists must have "
                          "one entry per conv stage")
    drop = cfg["network.drop_profile"]
    if len(drop) != len(maps) + 2:
        raise ConfigError(
            f"network.drop_profile needs {len(maps) + 2} entries "
            f"(input, each conv stage, fc), got {len(drop)}")
    stages = tuple(zip(maps, filters, cstrides, pexts, pstrides))
    return network.build_network(cfg["network.input_side"], stages,
                                 cfg["network.fc_units"],
                                 cfg["network.maxout_k"], drop)


def optimizer_from_config(cfg: RunConfig) -> optimizer.OptimizerConfig:
    return optimizer.OptimizerConfig(
        epsilon0=cfg["optimizer.epsilon0"],
        decay_f=cfg["optimizer.decay_f"],
        m_i=cfg["optimizer.m_i"],
        m_f=cfg["optimizer.m_f"],
        ramp_steps=cfg["optimizer.T"],
        max_norm_c=cfg["optimizer.max_norm_c"],
        batch_size=cfg["optimizer.batch_size"],
        momentum_ramp=cfg["optimizer.momentum_ramp"],
    )


def foveation_from_config(cfg: RunConfig) -> FoveationConfig:
    return FoveationConfig(cfg["foveation.r0"], cfg["foveation.sigma_slope"])


def grid_from_config(cfg: RunConfig) -> SamplingGrid:
    rings = cfg["sampling.rings"]
    if rings == "auto":
        return default_sampling_grid(cfg["network.input_side"])
    return SamplingGrid(rings)


def detect_from_config(cfg: RunConfig) -> detection.DetectConfig:
    return detection.DetectConfig(
        mask=detection.MaskConfig(cfg["detect.mask_threshold"],
                                  cfg["detect.median_size"],
                                  cfg["detect.erode_radius"]),
        prefilter=detection.PrefilterConfig(cfg["detect.kappa"],
                                            cfg["detect.prefilter_window"]),
        post=detection.PostprocessConfig(cfg["detect.prob_threshold"],
                                         cfg["detect.max_area"],
                                         cfg["detect.min_convexity"]),
        batch_windows=cfg["detect.batch_windows"],
        threads=cfg["threads"],
    )
