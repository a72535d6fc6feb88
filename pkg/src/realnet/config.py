"""Pipeline configuration: defaults, JSON loading, ``key=value`` overrides, validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # data
    dataset_root: str = "data"
    categories: list = field(default_factory=lambda: ["toy"])
    multiclass: bool = False
    work_dir: str = "work"
    image_size: int = 64
    seed: int = 0
    diffusion_seed: int = -1  # -1: use seed
    threads: int = 1
    workers: int = 1

    # feature extractor
    extractor_kind: str = "builtin_pyramid"
    extractor_widths: list = field(default_factory=lambda: [32, 64, 64, 32])
    extractor_strides: list = field(default_factory=lambda: [2, 2, 2, 2])
    extractor_convs: int = 2
    extractor_seed: int = 0
    feature_dir: str = ""

    # feature selection
    m: list = field(default_factory=lambda: [16, 32, 32, 16])
    afs_batches: int = 64
    afs_batch_size: int = 16
    afs_norm: str = "minmax"

    # reconstruction / residual selection / discriminator
    arch: str = "A_independent"
    recon_depth: int = 2
    recon_reduction: str = "sum"
    rrs_mode: str = "max_and_avg"
    rrs_P: float = 1.0 / 3.0
    disc_hidden: int = 128
    bn_momentum: float = 0.1
    seg_at: str = "native"

    # diffusion model
    diffusion_size: int = 32
    diffusion_T: int = 200
    diffusion_schedule: str = "cosine"
    diffusion_steps: int = 1500
    diffusion_batch: int = 16
    diffusion_lr: float = 1e-3
    diffusion_base: int = 16
    diffusion_mults: list = field(default_factory=lambda: [1, 2, 2])
    gamma: float = 0.001

    # anomaly synthesis
    sampler_kind: str = "ddpm"
    sample_steps: int = 20
    ddim_sigma_choice: str = "learned"
    synth_count: int = 64
    s_range: list = field(default_factory=lambda: [0.1, 0.2])
    donor_source: str = "sdas"
    texture_dir: str = ""
    delta_range: list = field(default_factory=lambda: [0.5, 1.0])
    use_foreground: bool = True
    anomaly_fraction: float = 0.5
    mask_threshold: float = 0.5

    # training / evaluation
    train_steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    fpr_limit: float = 0.3
    export_maps: bool = True

    def validate(self) -> "PipelineConfig":
        checks = [
            (self.image_size >= 8, "image_size must be at least 8"),
            (len(self.categories) >= 1, "at least one category"),
            (self.extractor_kind in ("builtin_pyramid", "file_ingest"), "extractor_kind"),
            (len(self.extractor_widths) == len(self.extractor_strides), "extractor widths/strides length"),
            (all(s in (1, 2) for s in self.extractor_strides), "extractor strides must be 1 or 2"),
            (self.extractor_kind == "file_ingest" or len(self.m) == len(self.extractor_widths),
             "one m entry per extractor layer"),
            (self.extractor_kind == "file_ingest"
             or all(1 <= mk <= ck for mk, ck in zip(self.m, self.extractor_widths)), "need 1 <= m_k <= c_k"),
            (self.extractor_kind != "file_ingest" or bool(self.feature_dir), "file_ingest needs feature_dir"),
            (self.afs_norm in ("minmax", "standardize"), "afs_norm"),
            (self.arch in ("A_independent", "C_neighbor_aligned"), "arch"),
            (self.recon_reduction in ("sum", "mean"), "recon_reduction"),
            (self.rrs_mode in ("max", "avg", "max_and_avg"), "rrs_mode"),
            (0.0 < self.rrs_P <= 1.0, "rrs_P must lie in (0, 1]"),
            (self.seg_at in ("native", "image"), "seg_at"),
            (self.diffusion_schedule in ("cosine", "linear"), "diffusion_schedule"),
            (self.diffusion_T >= 2, "diffusion_T must be at least 2"),
            (1 <= self.sample_steps <= self.diffusion_T, "sample_steps within 1..diffusion_T"),
            (self.sampler_kind in ("ddpm", "ddim"), "sampler_kind"),
            (self.ddim_sigma_choice in ("beta", "beta_tilde", "learned"), "ddim_sigma_choice"),
            (len(self.s_range) == 2 and 0 <= self.s_range[0] <= self.s_range[1], "s_range must be [lo, hi], 0 <= lo <= hi"),
            (len(self.delta_range) == 2 and 0 <= self.delta_range[0] <= self.delta_range[1] <= 1, "delta_range"),
            (self.donor_source in ("sdas", "texture_dir"), "donor_source"),
            (self.donor_source != "texture_dir" or bool(self.texture_dir), "texture_dir donor source needs texture_dir"),
            (0.0 <= self.anomaly_fraction <= 1.0, "anomaly_fraction"),
            (min(self.train_steps, self.diffusion_steps, self.synth_count) >= 0, "counts must be non-negative"),
            (self.batch_size >= 1 and self.diffusion_batch >= 1 and self.afs_batch_size >= 1, "batch sizes"),
            (self.threads >= 1 and self.workers >= 1, "threads and workers must be positive"),
            (0.0 < self.fpr_limit <= 1.0, "fpr_limit"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ConfigError("invalid configuration: " + "; ".join(bad))
        return self

    @property
    def effective_diffusion_seed(self) -> int:
        return self.seed if self.diffusion_seed < 0 else self.diffusion_seed

    def to_dict(self) -> dict:
        return asdict(self)

    def result_digest(self) -> str:
        return self.digest(RESULT_FIELDS)

    def digest(self, keys: list[str] | None = None, extra: dict | None = None) -> str:
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        if extra:
            d = {**d, **extra}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}
# fields that affect where and how fast things run, never what is computed
RUNTIME_FIELDS = ("work_dir", "workers", "threads", "export_maps")
RESULT_FIELDS = [name for name in FIELDS if name not in RUNTIME_FIELDS]


def _coerce(name: str, raw: Any, default: Any) -> Any:
    if isinstance(raw, str) and not isinstance(default, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError:
            if isinstance(default, list):
                raw = [json.loads(x) if x.strip()[:1].isdigit() or x.strip()[:1] in "-." else x.strip()
                       for x in raw.split(",")]
            else:
                raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    if isinstance(default, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{name}: expected true/false, got {raw!r}")
        return raw
    if isinstance(default, int):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{name}: expected an integer, got {raw!r}")
        return raw
    if isinstance(default, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {raw!r}")
        return float(raw)
    if isinstance(default, list):
        if not isinstance(raw, list):
            raise ConfigError(f"{name}: expected a list, got {raw!r}")
        return raw
    if isinstance(default, str):
        return str(raw)
    return raw


def apply_overrides(cfg: PipelineConfig, values: dict) -> PipelineConfig:
    for key, raw in values.items():
        if key not in FIELDS:
            raise ConfigError(f"unknown configuration key {key!r}")
        setattr(cfg, key, _coerce(key, raw, getattr(PipelineConfig(), key)))
    return cfg


def parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        apply_overrides(cfg, raw)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()
