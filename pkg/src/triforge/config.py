"""Flat dotted-key pipeline configuration.

One human-readable text file drives every stage. Keys are `stage.option`
pairs; types come from the defaults table and unknown keys are rejected.
The desk profile is the CI-sized default; the paper profile carries the
full-scale settings and is config-valid but not exercised by tests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import DenoiserConfig
from .fitting import FitConfig
from .refine import RefineConfig
from .vae import VaeConfig


class ConfigError(ValueError):
    pass


# Desk-scale defaults. Every legal key appears here; types are inferred
# from these values when parsing.
DEFAULTS = {
    "seed": 0,
    "artifacts": "artifacts",
    "profile": "desk",
    "dataset.n_objects": 4,
    "dataset.n_views": 8,
    "dataset.resolution": 32,
    "fit.steps": 1200,
    "fit.fit_steps": 400,
    "fit.rays_per_batch": 512,
    "fit.n_samples": 24,
    "fit.channels": 16,
    "fit.resolution": 64,
    "fit.split": 8,
    "fit.hidden": 64,
    "fit.depth": 3,
    "vae.steps": 400,
    "vae.lr": 2e-3,
    "vae.batch": 2,
    "vae.latent_channels": 8,
    "vae.base_channels": 32,
    "vae.downsamples": 2,
    "ldm.steps": 1500,
    "ldm.lr": 2e-3,
    "ldm.batch": 8,
    "ldm.base": 32,
    "ldm.emb_dim": 64,
    "ldm.timesteps": 1000,
    "ldm.snr_shift": 1.0,
    "sample.steps": 200,
    "sample.guidance": 7.5,
    "refine.sdf_resolution": 32,
    "refine.latent_iters": 800,
    "refine.pixel_iters": 400,
    "refine.distill_iters": 512,
    "refine.render_size": 128,
    "refine.face_budget": 5000,
    "refine.n_cameras": 8,
    "caption.concurrency": 4,
    "caption.max_retries": 3,
}

# Named overrides on top of DEFAULTS.
PROFILES = {
    "desk": {},
    "smoke": {
        "profile": "smoke",
        "dataset.n_objects": 2,
        "dataset.n_views": 4,
        "fit.steps": 200,
        "fit.fit_steps": 100,
        "vae.steps": 50,
        "ldm.steps": 100,
        "sample.steps": 20,
        "refine.latent_iters": 40,
        "refine.pixel_iters": 20,
        "refine.distill_iters": 30,
        "refine.render_size": 64,
    },
    "paper": {
        "profile": "paper",
        "dataset.n_objects": 64,
        "dataset.n_views": 24,
        "dataset.resolution": 128,
        "fit.steps": 20000,
        "fit.fit_steps": 4000,
        "fit.channels": 32,
        "fit.resolution": 256,
        "vae.steps": 20000,
        "vae.downsamples": 3,
        "ldm.steps": 100000,
        "ldm.base": 128,
        "ldm.snr_shift": 4.0,
        "refine.sdf_resolution": 128,
        "refine.render_size": 512,
        "refine.face_budget": 50000,
    },
}


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = dict(DEFAULTS)
        merged.update(self.values)
        for key, val in merged.items():
            want = type(DEFAULTS[key])
            if want is float and isinstance(val, int):
                merged[key] = float(val)
            elif not isinstance(val, want):
                raise ConfigError(
                    f"{key}: expected {want.__name__}, got {val!r}")
        self.values = merged

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values["seed"]

    @property
    def artifact_dir(self):
        return Path(self.values["artifacts"])

    def replace(self, **updates) -> "PipelineConfig":
        merged = dict(self.values)
        merged.update(updates)
        return PipelineConfig(merged)

    def stage(self, prefix):
        """Options for one stage with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items()
                if k.startswith(p)}

    # ------------------------------------------------------------- builders

    def fit_config(self) -> FitConfig:
        d = self.stage("fit")
        return FitConfig(seed=self.seed, **d)

    def vae_config(self) -> VaeConfig:
        return VaeConfig(
            plane_channels=self["fit.channels"],
            plane_resolution=self["fit.resolution"],
            split=self["fit.split"],
            latent_channels=self["vae.latent_channels"],
            base_channels=self["vae.base_channels"],
            downsamples=self["vae.downsamples"],
            seed=self.seed,
        )

    def denoiser_config(self) -> DenoiserConfig:
        vc = self.vae_config()
        return DenoiserConfig(
            channels=vc.latent_channels,
            height=vc.latent_resolution,
            width=3 * vc.latent_resolution,
            base=self["ldm.base"],
            emb_dim=self["ldm.emb_dim"],
            T=self["ldm.timesteps"],
            seed=self.seed,
        )

    def refine_config(self) -> RefineConfig:
        d = self.stage("refine")
        return RefineConfig(seed=self.seed, **d)

    # ---------------------------------------------------------- persistence

    def dumps(self) -> str:
        lines = [f"{k} = {_format_value(v)}"
                 for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def _format_value(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, text):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key}")
    want = type(DEFAULTS[key])
    try:
        if want is int:
            return int(text)
        if want is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{key}: bad value {text!r}") from e


def loads(text) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        values[key] = _parse_value(key, val)
    return PipelineConfig(values)


def load_config(path) -> PipelineConfig:
    return loads(Path(path).read_text())


def default_config(profile="desk") -> PipelineConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; "
                          f"choose from {sorted(PROFILES)}")
    values = dict(DEFAULTS)
    values.update(PROFILES[profile])
    return PipelineConfig(values)
