"""Experiment configuration and run manifests.

Config files are line-oriented ``key = value`` with dotted namespaces
(``encoder.depth = 4``); ``#`` starts a comment.  Unknown keys are
rejected and every default is materialized into the config echo so
reports never carry orphan numbers.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from .distill import DistillConfig, MaskSchedule, NuisanceConfig
from .encoder import EncoderConfig
from .fusion import TokenGridGeometry
from .synthbench import BenchConfig

VERSION = "0.1.0"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _opt_str(s: str) -> Optional[str]:
    return None if s.strip().lower() in ("", "none") else s.strip()


# key -> (coercion, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    "seed": (int, 0),
    # encoder
    "encoder.depth": (int, 4),
    "encoder.dim": (int, 96),
    "encoder.heads": (int, 4),
    "encoder.ffn_ratio": (int, 4),
    "encoder.ffn_kind": (str, "gelu"),
    "encoder.pos_variant": (str, "patch-phase-2d"),
    "encoder.rope_base": (float, 10000.0),
    "encoder.p_h": (int, 4),
    "encoder.p_w": (int, 4),
    "encoder.height": (int, 48),
    "encoder.width": (int, 64),
    # distillation
    "distill.steps": (int, 600),
    "distill.batch": (int, 8),
    "distill.tau_t": (float, 0.04),
    "distill.tau_s": (float, 0.1),
    "distill.center_momentum": (float, 0.9),
    "distill.ema_start": (float, 0.996),
    "distill.ema_end": (float, 1.0),
    "distill.proj_dim": (int, 512),
    "distill.mask.start": (float, 0.3),
    "distill.mask.end": (float, 0.7),
    "distill.mask.ramp_fraction": (float, 0.8),
    "distill.mask_fixed": (_bool, False),  # fixed-ratio ablation: start=end=mask.end
    "distill.mask_mode": (str, "one-view"),
    "distill.fusion_mode": (str, "interleave"),
    "distill.fusion_stride": (int, 1),
    "distill.lr": (float, 3e-4),
    "distill.lr_cosine": (_bool, True),
    "distill.weight_decay": (float, 0.04),
    "distill.nuisance": (_bool, False),
    "distill.nuisance_mode": (str, "independent"),
    "distill.nuisance_polarity": (str, "none"),
    "distill.nuisance_occlusion": (_bool, True),
    "distill.nuisance_photometric": (_bool, True),
    "distill.nuisance_noise": (float, 0.08),
    "distill.nuisance_ramp": (float, 0.0),
    "distill.crop_width": (int, 64),  # 0 = train on the full sample width
    "distill.log_every": (int, 1),
    "distill.ckpt_every": (int, 200),
    # synthetic benchmark
    "bench.preset": (str, "HARD_S1"),
    "bench.count": (int, 64),
    "bench.height": (int, 48),
    "bench.width": (int, 160),
    "bench.d_min": (int, -1),  # -1 = preset default
    "bench.d_max": (int, -1),
    "bench.source_manifest": (_opt_str, None),
    # probes
    "probe.dmax": (int, 24),
    "probe.p1": (float, 0.1),
    "probe.p2": (float, 0.8),
    "probe.lr_tol": (float, 1.0),
    "probe.refine_window": (int, 2),
    "probe.temp": (float, 0.07),
    "probe.counterfactual": (_opt_str, None),
    "probe.max_samples": (int, 16),
    "probe.hard_subset": (int, 8),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def coerce(raw: dict[str, str]) -> dict[str, Any]:
    values: dict[str, Any] = {k: d for k, (_, d) in SCHEMA.items()}
    for key, sval in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        fn = SCHEMA[key][0]
        try:
            values[key] = fn(sval)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key!r}: {sval!r} ({e})") from e
    return values


@dataclass
class ExperimentConfig:
    """All module configs in one document, with every default materialized."""

    values: dict[str, Any]

    @classmethod
    def load(cls, path: Optional[str] = None,
             overrides: Optional[dict[str, str]] = None) -> "ExperimentConfig":
        raw: dict[str, str] = {}
        if path is not None:
            try:
                with open(path) as f:
                    raw = parse_config_text(f.read(), source=path)
            except OSError as e:
                raise ConfigError(f"cannot read config {path!r}: {e}") from e
        if overrides:
            for k, v in overrides.items():
                raw[k] = v
        return cls(values=coerce(raw))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def echo(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def encoder_config(self) -> EncoderConfig:
        v = self.values
        try:
            geom = TokenGridGeometry(p_h=v["encoder.p_h"], p_w=v["encoder.p_w"],
                                     height=v["encoder.height"], width=v["encoder.width"])
            return EncoderConfig(geometry=geom, depth=v["encoder.depth"], dim=v["encoder.dim"],
                                 heads=v["encoder.heads"], ffn_ratio=v["encoder.ffn_ratio"],
                                 ffn_kind=v["encoder.ffn_kind"],
                                 pos_variant=v["encoder.pos_variant"],
                                 rope_base=v["encoder.rope_base"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def distill_config(self) -> DistillConfig:
        v = self.values
        end = v["distill.mask.end"]
        start = end if v["distill.mask_fixed"] else v["distill.mask.start"]
        mask = MaskSchedule(start=start, end=end,
                            ramp_fraction=v["distill.mask.ramp_fraction"])
        nuisance = None
        if v["distill.nuisance"]:
            nuisance = NuisanceConfig(photometric_mode=v["distill.nuisance_mode"],
                                      polarity=v["distill.nuisance_polarity"],
                                      occlusion=v["distill.nuisance_occlusion"],
                                      photometric=v["distill.nuisance_photometric"],
                                      noise_sigma=(0.0, v["distill.nuisance_noise"]))
        try:
            return DistillConfig(steps=v["distill.steps"], batch=v["distill.batch"],
                                 tau_t=v["distill.tau_t"], tau_s=v["distill.tau_s"],
                                 center_momentum=v["distill.center_momentum"],
                                 ema_start=v["distill.ema_start"], ema_end=v["distill.ema_end"],
                                 proj_dim=v["distill.proj_dim"], mask=mask,
                                 mask_mode=v["distill.mask_mode"],
                                 fusion_mode=v["distill.fusion_mode"],
                                 fusion_stride=v["distill.fusion_stride"],
                                 lr=v["distill.lr"], lr_cosine=v["distill.lr_cosine"],
                                 weight_decay=v["distill.weight_decay"], nuisance=nuisance,
                                 nuisance_ramp=v["distill.nuisance_ramp"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def bench_config(self) -> BenchConfig:
        from .synthbench import preset_config
        v = self.values
        overrides: dict[str, Any] = {}
        if v["bench.d_min"] >= 0:
            overrides["d_min"] = v["bench.d_min"]
        if v["bench.d_max"] >= 0:
            overrides["d_max"] = v["bench.d_max"]
        if v["bench.source_manifest"]:
            overrides["source_manifest"] = v["bench.source_manifest"]
        try:
            return preset_config(v["bench.preset"], seed=v["seed"],
                                 height=v["bench.height"], width=v["bench.width"],
                                 p_h=v["encoder.p_h"], p_w=v["encoder.p_w"], **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from e


@dataclass
class RunManifest:
    """Provenance of one CLI run; written before work, finalized after."""

    command: str
    config: dict[str, Any]
    seed: int
    path: str
    version: str = VERSION
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    status: str = "running"

    def _dump(self) -> None:
        doc = {"command": self.command, "config": self.config, "seed": self.seed,
               "version": self.version, "outputs": sorted(set(self.outputs)),
               "started": self.started, "finished": self.finished, "status": self.status}
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, self.path)

    def begin(self) -> None:
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self._dump()

    def add_output(self, path: str) -> None:
        self.outputs.append(os.path.abspath(path))

    def finalize(self, status: str = "done") -> None:
        self.finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.status = status
        self._dump()


def write_report(path: str, report: dict) -> None:
    """Deterministic JSON report: sorted keys, stable float repr, newline-terminated."""
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
