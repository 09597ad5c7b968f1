"""DDPM over VAE latents: forward noising, noise-prediction training,
ancestral sampling, and conditioning via embedding vectors.

Conditions are plain vectors concatenated with the noised latent and a
sinusoidal time embedding (a learned null token stands in when no condition
is supplied), so the unconditional and conditional samplers share one code
path. Text/image embeddings arrive as files; partial-splat embeddings come
from a small permutation-invariant encoder trained with the denoiser.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .errors import DataError, FormatError, NumericalError
from .nn import MLP
from .splats import ATTR_DIM, GaussianSplat
from .vae import masked_max_pool

SOURCE_NONE = "none"
SOURCE_FILE = "file"
SOURCE_PARTIAL = "partial_splat"


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule with precomputed cumulative products.

    The default beta range is chosen so that at T=100 steps the terminal
    signal fraction alpha_bar_T drops below 0.05 while alpha_bar_0 stays at
    0.9999.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("all betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if np.any(np.diff(alpha_bars) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if alpha_bars[-1] >= 0.05:
            raise ValueError(f"terminal alpha_bar {alpha_bars[-1]:.4f} >= 0.05; "
                             "increase T or the beta range")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @classmethod
    def linear(cls, t_steps: int = 100, beta_start: float = 1e-4,
               beta_end: float = 0.065) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, t_steps))

    @property
    def t_steps(self) -> int:
        return len(self.betas)


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-process sample: sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps."""
    if not 0 <= t < sched.t_steps:
        raise ValueError(f"t={t} outside [0, {sched.t_steps})")
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * np.asarray(z0, dtype=np.float64) \
        + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def time_embedding(t, dim: int, t_steps: int) -> np.ndarray:
    """Sinusoidal embeddings of integer steps, shape (..., dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


@dataclass
class ConditionEmbedding:
    """A fixed-size conditioning vector with its provenance tag."""

    vector: np.ndarray
    source: str = SOURCE_NONE

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32).reshape(-1)

    @property
    def dim(self) -> int:
        return len(self.vector)


class Denoiser:
    """MLP noise predictor over [z_t | time embedding | condition]."""

    def __init__(self, latent_dim: int = 64, cond_dim: int = 64, hidden: int = 256,
                 depth: int = 3, time_dim: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        sizes = [latent_dim + time_dim + cond_dim] + [hidden] * depth + [latent_dim]
        self.mlp = MLP(sizes, rng)
        self.null_token = Tensor(np.zeros(cond_dim, dtype=np.float32), requires_grad=True)

    def forward(self, z_t: Tensor, t_emb: np.ndarray, cond: Tensor) -> Tensor:
        x = ad.concat([z_t, Tensor(t_emb), cond], axis=1)
        return self.mlp(x)

    def predict(self, z_t: np.ndarray, t: int, cond: np.ndarray | None,
                t_steps: int) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float32).reshape(-1, self.latent_dim)
        b = len(z_t)
        if cond is None:
            cond_arr = np.tile(self.null_token.data, (b, 1))
        else:
            cond_arr = np.asarray(cond, dtype=np.float32).reshape(-1, self.cond_dim)
            if len(cond_arr) == 1 and b > 1:
                cond_arr = np.tile(cond_arr, (b, 1))
        t_emb = time_embedding(np.full(b, t), self.time_dim, t_steps)
        return self.forward(Tensor(z_t), t_emb, Tensor(cond_arr)).data

    def params(self) -> list[Tensor]:
        return self.mlp.params() + [self.null_token]


class PartialEncoder:
    """Permutation-invariant embedding of a partial splat's attribute rows."""

    def __init__(self, cond_dim: int = 64, width: int = 128,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width = width
        self.cond_dim = cond_dim
        self.point_mlp = MLP([ATTR_DIM, width, width], rng)
        self.head = MLP([width, cond_dim], rng)

    def forward(self, batch: np.ndarray, lengths: np.ndarray) -> Tensor:
        b, n, d = batch.shape
        h = ad.relu(self.point_mlp(Tensor(batch.reshape(b * n, d))))
        pooled = masked_max_pool(ad.reshape(h, (b, n, self.width)), lengths)
        return self.head(pooled)

    def params(self) -> list[Tensor]:
        return self.point_mlp.params() + self.head.params()


def embed_partial(partial: GaussianSplat, encoder: PartialEncoder) -> ConditionEmbedding:
    """E-dim permutation-invariant embedding of a partial splat."""
    if partial.count == 0:
        raise DataError("cannot embed an empty partial splat")
    rows = partial.attributes()
    vec = encoder.forward(rows[None], np.array([len(rows)])).data[0]
    return ConditionEmbedding(vector=vec, source=SOURCE_PARTIAL)


def make_partial(splat: GaussianSplat, seed: int = 0,
                 jitter: float = 0.15) -> GaussianSplat:
    """One chunk of a jittered 2x2x2 bounding-box partition of the splat.

    The seven other chunks are the occluded region; together the eight
    chunks partition the Gaussians exactly. An empty drawn chunk redraws
    among the non-empty ones.
    """
    if splat.count < 8:
        raise DataError(f"make_partial needs at least 8 Gaussians, got {splat.count}")
    rng = np.random.Generator(np.random.PCG64(seed))
    chunks = partition_chunks(splat, rng, jitter)
    pick = int(rng.integers(0, 8))
    if len(chunks[pick]) == 0:
        nonempty = [i for i in range(8) if len(chunks[i])]
        pick = nonempty[int(rng.integers(0, len(nonempty)))]
    return splat.subset(chunks[pick])


def partition_chunks(splat: GaussianSplat, rng: np.random.Generator,
                     jitter: float = 0.15) -> list[np.ndarray]:
    """Indices of the 8 jittered-octant chunks (disjoint, covering)."""
    c = splat.centers.astype(np.float64)
    lo, hi = c.min(axis=0), c.max(axis=0)
    mid = (lo + hi) / 2.0 + rng.uniform(-jitter, jitter, size=3) * (hi - lo)
    octant = ((c[:, 0] >= mid[0]).astype(int) * 4
              + (c[:, 1] >= mid[1]).astype(int) * 2
              + (c[:, 2] >= mid[2]).astype(int))
    return [np.nonzero(octant == k)[0] for k in range(8)]


_COND_MAGIC = b"SFCE"


def save_condition_file(vector: np.ndarray, path) -> None:
    """Write a raw embedding vector (magic, dim, packed float32)."""
    vec = np.asarray(vector, dtype=np.float32).reshape(-1)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_COND_MAGIC)
        f.write(struct.pack("<I", len(vec)))
        f.write(vec.tobytes())
    os.replace(tmp, path)


def read_condition_vector(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _COND_MAGIC:
            raise FormatError(f"{path}: not a condition-embedding file (bad magic)")
        (dim,) = struct.unpack("<I", f.read(4))
        buf = f.read(4 * dim)
        if len(buf) != 4 * dim:
            raise DataError(f"{path}: truncated embedding")
        return np.frombuffer(buf, dtype=np.float32).copy()


class ConditionProjector:
    """Learned linear map from raw file embeddings (E') to the model's E."""

    def __init__(self, in_dim: int, cond_dim: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.linear = MLP([in_dim, cond_dim], rng)

    def project(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float32).reshape(1, -1)
        if raw.shape[1] != self.in_dim:
            raise DataError(f"embedding has dimension {raw.shape[1]}, projector "
                            f"expects {self.in_dim}")
        return self.linear(Tensor(raw)).data[0]

    def params(self) -> list[Tensor]:
        return self.linear.params()


def load_condition_file(path, projector: ConditionProjector) -> ConditionEmbedding:
    """Read a raw embedding and project it into the model's condition space."""
    return ConditionEmbedding(vector=projector.project(read_condition_vector(path)),
                              source=SOURCE_FILE)


def ldm_loss(denoiser: Denoiser, z0: np.ndarray, cond: ConditionEmbedding | None,
             sched: NoiseSchedule, seed: int = 0) -> float:
    """Noise-prediction objective: E ||eps - eps_hat||^2 (summed over D).

    t is uniform, eps standard normal; deterministic per seed.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1, denoiser.latent_dim)
    b = len(z0)
    t = rng.integers(0, sched.t_steps, size=b)
    eps = rng.standard_normal(z0.shape)
    ab = sched.alpha_bars[t][:, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    cond_vec = None if cond is None else cond.vector
    total = 0.0
    for i in range(b):
        pred = denoiser.predict(z_t[i], int(t[i]), cond_vec, sched.t_steps)[0]
        total += float(np.sum((eps[i] - pred.astype(np.float64)) ** 2))
    return total / b


def p_sample_loop(denoiser: Denoiser, cond: ConditionEmbedding | None,
                  sched: NoiseSchedule, seed: int = 0,
                  guidance_scale: float = 1.0) -> np.ndarray:
    """Ancestral DDPM sampling from pure noise down to z_0.

    Uses the posterior variance beta_tilde. guidance_scale > 1 blends the
    conditional and null-token predictions (classifier-free guidance);
    at 1.0 the plain conditional/unconditional path runs. Deterministic
    per seed.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    d = denoiser.latent_dim
    z = rng.standard_normal(d)
    cond_vec = None if cond is None else cond.vector
    for t in range(sched.t_steps - 1, -1, -1):
        eps_hat = denoiser.predict(z, t, cond_vec, sched.t_steps)[0].astype(np.float64)
        if guidance_scale != 1.0 and cond_vec is not None:
            eps_null = denoiser.predict(z, t, None, sched.t_steps)[0].astype(np.float64)
            eps_hat = eps_null + guidance_scale * (eps_hat - eps_null)
        alpha = sched.alphas[t]
        ab = sched.alpha_bars[t]
        mean = (z - sched.betas[t] / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
        if t > 0:
            ab_prev = sched.alpha_bars[t - 1]
            var = sched.betas[t] * (1.0 - ab_prev) / (1.0 - ab)
            z = mean + np.sqrt(var) * rng.standard_normal(d)
        else:
            z = mean
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite latent during sampling at step {t}")
    return z


def p_sample_batch(denoiser: Denoiser, cond: ConditionEmbedding | None,
                   sched: NoiseSchedule, seeds) -> np.ndarray:
    """Vectorized ancestral sampling, one independent noise stream per seed.

    Each row follows the same draw order as p_sample_loop with that seed
    (initial latent, then one noise vector per non-terminal step).
    """
    seeds = list(seeds)
    d = denoiser.latent_dim
    t_steps = sched.t_steps
    z = np.empty((len(seeds), d))
    noise = np.empty((len(seeds), t_steps - 1, d))
    for i, s in enumerate(seeds):
        rng = np.random.Generator(np.random.PCG64(s))
        z[i] = rng.standard_normal(d)
        noise[i] = rng.standard_normal((t_steps - 1, d))
    cond_vec = None if cond is None else cond.vector
    for t in range(t_steps - 1, -1, -1):
        eps_hat = denoiser.predict(z, t, cond_vec, t_steps).astype(np.float64)
        alpha = sched.alphas[t]
        ab = sched.alpha_bars[t]
        mean = (z - sched.betas[t] / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
        if t > 0:
            ab_prev = sched.alpha_bars[t - 1]
            var = sched.betas[t] * (1.0 - ab_prev) / (1.0 - ab)
            z = mean + np.sqrt(var) * noise[:, t_steps - 1 - t]
        else:
            z = mean
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite latent during sampling at step {t}")
    return z


@dataclass
class LDMConfig:
    latent_dim: int = 64
    cond_dim: int = 64
    hidden: int = 256
    depth: int = 3
    time_dim: int = 32
    t_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.065
    steps: int = 4000
    batch: int = 32
    lr: float = 1e-4
    seed: int = 0
    cond_dropout: float = 0.1
    partial_width: int = 128


@dataclass
class LDMModel:
    denoiser: Denoiser
    schedule: NoiseSchedule
    partial_encoder: PartialEncoder | None = None
    projector: ConditionProjector | None = None

    def params(self) -> list[Tensor]:
        out = self.denoiser.params()
        if self.partial_encoder is not None:
            out += self.partial_encoder.params()
        if self.projector is not None:
            out += self.projector.params()
        return out


@dataclass
class LDMResult:
    model: LDMModel
    loss_curve: list
    aborted: bool = False


def train_ldm(latents: np.ndarray, cfg: LDMConfig | None = None,
              partials: list[GaussianSplat] | None = None,
              file_embeddings: np.ndarray | None = None) -> LDMResult:
    """Train the noise predictor on a latent dataset.

    Conditioning: none (null token only), per-item partial splats (their
    encoder trains jointly), or per-item raw file embeddings (the E'->E
    projector trains jointly). With conditioning, the condition is dropped
    to the null token with probability cfg.cond_dropout.
    """
    cfg = cfg if cfg is not None else LDMConfig()
    latents = np.asarray(latents, dtype=np.float64).reshape(-1, cfg.latent_dim)
    if len(latents) == 0:
        raise DataError("train_ldm needs at least one latent")
    if partials is not None and file_embeddings is not None:
        raise ValueError("choose one conditioning source")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    sched = NoiseSchedule.linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)
    denoiser = Denoiser(cfg.latent_dim, cfg.cond_dim, cfg.hidden, cfg.depth,
                        cfg.time_dim, rng)
    model = LDMModel(denoiser, sched)

    partial_batch = lengths = None
    if partials is not None:
        if len(partials) != len(latents):
            raise DataError("one partial splat per latent required")
        model.partial_encoder = PartialEncoder(cfg.cond_dim, cfg.partial_width, rng)
        from .vae import _pad_batch
        partial_batch, lengths = _pad_batch([p.attributes() for p in partials])
    raw_emb = None
    if file_embeddings is not None:
        raw_emb = np.asarray(file_embeddings, dtype=np.float32)
        if len(raw_emb) != len(latents):
            raise DataError("one embedding per latent required")
        model.projector = ConditionProjector(raw_emb.shape[1], cfg.cond_dim, rng)

    opt = ad.Adam(model.params(), lr=cfg.lr)
    curve: list[float] = []
    aborted = False
    n = len(latents)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch)
        t = rng.integers(0, sched.t_steps, size=cfg.batch)
        eps = rng.standard_normal((cfg.batch, cfg.latent_dim))
        ab = sched.alpha_bars[t][:, None]
        z_t = (np.sqrt(ab) * latents[idx] + np.sqrt(1 - ab) * eps).astype(np.float32)
        t_emb = time_embedding(t, cfg.time_dim, sched.t_steps)
        drop = rng.uniform(size=cfg.batch) < cfg.cond_dropout
        with ad.Tape() as tape:
            null_rows = _rows_of(denoiser.null_token, cfg.batch)
            if partials is not None:
                emb = model.partial_encoder.forward(partial_batch[idx], lengths[idx])
                cond = _mask_rows(emb, null_rows, drop)
            elif raw_emb is not None:
                emb = model.projector.linear(Tensor(raw_emb[idx]))
                cond = _mask_rows(emb, null_rows, drop)
            else:
                cond = null_rows
            pred = denoiser.forward(Tensor(z_t), t_emb, cond)
            diff = ad.sub(pred, eps.astype(np.float32))
            loss = ad.reduce_mean(ad.reduce_sum(ad.square(diff), axis=1))
            if not np.isfinite(loss.data):
                aborted = True
                break
            grads = tape.backward(loss)
        opt.step(grads)
        curve.append(float(loss.data))
    return LDMResult(model, curve, aborted)


def _rows_of(token: Tensor, b: int) -> Tensor:
    """Tile a parameter vector into (b, dim) rows on the tape."""
    ones = Tensor(np.ones((b, 1), dtype=np.float32))
    return ad.matmul(ones, ad.reshape(token, (1, -1)))


def _mask_rows(emb: Tensor, null_rows: Tensor, drop: np.ndarray) -> Tensor:
    """Rowwise select null_rows where drop else emb (condition dropout)."""
    keep = (~drop)[:, None].astype(np.float32)
    keep = np.broadcast_to(keep, emb.data.shape).copy()
    return ad.add(ad.mul(emb, Tensor(keep)),
                  ad.mul(null_rows, Tensor(1.0 - keep)))


def save_ldm(model: LDMModel, path) -> None:
    den = model.denoiser
    tensors = den.mlp.state_dict("den")
    tensors["null_token"] = den.null_token.data
    meta = {
        "kind": "ldm",
        "latent_dim": den.latent_dim,
        "cond_dim": den.cond_dim,
        "time_dim": den.time_dim,
        "hidden": den.mlp.layers[0].weight.data.shape[1],
        "depth": len(den.mlp.layers) - 1,
        "betas": [float(b) for b in model.schedule.betas],
        "has_partial_encoder": model.partial_encoder is not None,
        "partial_width": (model.partial_encoder.width
                          if model.partial_encoder is not None else 0),
        "projector_in": (model.projector.in_dim
                         if model.projector is not None else 0),
    }
    if model.partial_encoder is not None:
        tensors.update(model.partial_encoder.point_mlp.state_dict("part.p"))
        tensors.update(model.partial_encoder.head.state_dict("part.h"))
    if model.projector is not None:
        tensors.update(model.projector.linear.state_dict("proj"))
    save_tensors(path, tensors, meta)


def load_ldm(path) -> LDMModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "ldm":
        raise DataError(f"{path}: checkpoint is not an LDM bundle")
    den = Denoiser(meta["latent_dim"], meta["cond_dim"], meta["hidden"],
                   meta["depth"], meta["time_dim"])
    den.mlp.load_state_dict(tensors, "den")
    den.null_token.data = np.ascontiguousarray(tensors["null_token"], dtype=np.float32)
    model = LDMModel(den, NoiseSchedule(np.array(meta["betas"])))
    if meta["has_partial_encoder"]:
        model.partial_encoder = PartialEncoder(meta["cond_dim"], meta["partial_width"])
        model.partial_encoder.point_mlp.load_state_dict(tensors, "part.p")
        model.partial_encoder.head.load_state_dict(tensors, "part.h")
    if meta["projector_in"]:
        model.projector = ConditionProjector(meta["projector_in"], meta["cond_dim"])
        model.projector.linear.load_state_dict(tensors, "proj")
    return model
