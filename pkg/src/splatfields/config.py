"""Declarative pipeline configuration shared by all CLI stages.

A config file is a flat JSON object; unknown keys are rejected. Command
line flags override file values. All stage randomness is derived from the
single root seed so a whole pipeline is reproducible end to end.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass

from .errors import FormatError


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 0  # 0 = library default

    # preprocessing / ground-truth fields
    scale_clip: float = 0.01
    d_trunc: float = 0.05
    mapping: str = "linear"
    n_near: int = 20000
    n_uniform: int = 5000
    near_sigma: float = 0.01

    # neural field
    plane_res: int = 32
    channels: int = 16
    head_hidden: int = 128
    head_depth: int = 3
    fit_steps: int = 2000
    fit_batch: int = 1024
    fit_lr: float = 3e-3

    # VAE
    latent_dim: int = 64
    encoder_width: int = 256
    decoder_hidden: int = 256
    vae_steps: int = 5000
    vae_lr: float = 1e-4
    beta: float = 1e-4
    queries_per_shape: int = 512

    # latent diffusion
    cond_dim: int = 64
    ldm_hidden: int = 256
    ldm_depth: int = 3
    t_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.065
    ldm_steps: int = 4000
    ldm_batch: int = 32
    ldm_lr: float = 1e-4
    cond_dropout: float = 0.1
    guidance_scale: float = 1.0

    # extraction
    octree_depth: int = 8
    theta: float = 0.3
    samples_per_axis: int = 3
    n_gaussians: int = 100000
    refine_steps: int = 300
    refine_lr: float = 1e-3

    # metrics
    metric_queries: int = 4096

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        unknown = set(data) - cls.field_names()
        if unknown:
            raise FormatError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: invalid JSON config: {e}") from e
        if not isinstance(data, dict):
            raise FormatError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def override(self, values: dict) -> "PipelineConfig":
        known = {k: v for k, v in values.items() if v is not None}
        unknown = set(known) - self.field_names()
        if unknown:
            raise FormatError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **known)

    def resolved(self) -> dict:
        return dataclasses.asdict(self)


def stage_seed(root_seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the root seed."""
    return (int(root_seed) * 2654435761 + zlib.crc32(stage.encode("utf-8"))) % (2 ** 31)
