"""Splat-to-latent VAE: permutation-invariant encoder, triplane decoder,
and joint training with the field heads.

The encoder is PointNet-style (shared per-element MLP, masked max pool,
mean/log-variance head) and accepts either full 14-dim Gaussian attribute
rows or bare 3-dim points (the point-to-Gaussian variant).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .errors import DataError, NumericalError
from .fields_gt import FieldSampleSet, TruncationConfig
from .neural_field import (FieldHeads, NeuralField, Triplane, attribute_losses,
                           triplane_features)
from .nn import MLP
from .splats import ATTR_DIM, GaussianSplat

MODE_ATTRIBUTES = "attributes"
MODE_POINTS = "points"
_MODE_DIMS = {MODE_ATTRIBUTES: ATTR_DIM, MODE_POINTS: 3}


@dataclass
class LatentCode:
    """VAE posterior for one shape with its recorded reparameterization draw."""

    mean: np.ndarray
    log_variance: np.ndarray
    sample: np.ndarray
    eps: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)


def masked_max_pool(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Max over axis 1 of a (B, N, W) tensor, ignoring padded rows."""
    b, n, w = x.data.shape
    mask = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
    masked = np.where(mask[:, :, None], x.data, -np.inf)
    arg = masked.argmax(axis=1)
    out = np.take_along_axis(masked, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full,)

    return ad.record((x,), out.astype(np.float32), backward)


class GSEncoder:
    """Shared per-element MLP + max pool + posterior head."""

    def __init__(self, mode: str = MODE_ATTRIBUTES, width: int = 256,
                 latent_dim: int = 64, rng: np.random.Generator | None = None):
        if mode not in _MODE_DIMS:
            raise ValueError(f"unknown encoder mode '{mode}'")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mode = mode
        self.in_dim = _MODE_DIMS[mode]
        self.width = width
        self.latent_dim = latent_dim
        self.point_mlp = MLP([self.in_dim, width, width], rng)
        self.head = MLP([width, width, 2 * latent_dim], rng)

    def forward(self, batch: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, N, in_dim) padded rows -> posterior mean and log-variance (B, D)."""
        b, n, d = batch.shape
        if d != self.in_dim:
            raise DataError(f"encoder in '{self.mode}' mode expects {self.in_dim}-dim "
                            f"inputs, got {d}")
        flat = Tensor(batch.reshape(b * n, d))
        h = ad.relu(self.point_mlp(flat))
        pooled = masked_max_pool(ad.reshape(h, (b, n, self.width)), lengths)
        out = self.head(pooled)
        return (ad.slice_axis(out, 0, self.latent_dim),
                ad.slice_axis(out, self.latent_dim, 2 * self.latent_dim))

    def params(self) -> list[Tensor]:
        return self.point_mlp.params() + self.head.params()


class TriplaneDecoder:
    """MLP from a latent vector to the three feature planes."""

    def __init__(self, latent_dim: int = 64, plane_res: int = 32, channels: int = 16,
                 hidden: int = 256, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.plane_res = plane_res
        self.channels = channels
        self.mlp = MLP([latent_dim, hidden, 3 * plane_res * plane_res * channels], rng)

    def forward(self, z: Tensor) -> Tensor:
        """(B, D) -> (B, 3, H, W, C) plane tensor."""
        b = z.data.shape[0]
        r, c = self.plane_res, self.channels
        return ad.reshape(self.mlp(z), (b, 3, r, r, c))

    def params(self) -> list[Tensor]:
        return self.mlp.params()


def _encoder_input(splat_or_points, mode: str) -> np.ndarray:
    if isinstance(splat_or_points, GaussianSplat):
        rows = splat_or_points.attributes()
    else:
        rows = np.asarray(splat_or_points, dtype=np.float32)
        if rows.ndim != 2:
            raise DataError("point input must be a (N, dim) array")
    if rows.shape[0] < 1:
        raise DataError("encoder input must contain at least one element")
    if rows.shape[1] != _MODE_DIMS[mode]:
        raise DataError(f"encoder in '{mode}' mode expects {_MODE_DIMS[mode]}-dim rows, "
                        f"got {rows.shape[1]}")
    return rows


def encode(splat_or_points, encoder: GSEncoder, seed: int = 0) -> LatentCode:
    """Posterior for one splat (or point cloud) with a seeded sample."""
    rows = _encoder_input(splat_or_points, encoder.mode)
    mean_t, logvar_t = encoder.forward(rows[None], np.array([len(rows)]))
    mean = mean_t.data[0].astype(np.float64)
    logvar = logvar_t.data[0].astype(np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    eps = rng.standard_normal(encoder.latent_dim)
    sample = mean + np.exp(0.5 * logvar) * eps
    return LatentCode(mean=mean, log_variance=logvar, sample=sample, eps=eps)


def decode(z: np.ndarray, decoder: TriplaneDecoder) -> Triplane:
    """Deterministic triplane from one latent vector."""
    z = np.asarray(z, dtype=np.float32).reshape(-1)
    if len(z) != decoder.latent_dim:
        raise DataError(f"latent has dimension {len(z)}, decoder expects "
                        f"{decoder.latent_dim}")
    planes = decoder.forward(Tensor(z[None]))
    return Triplane(Tensor(planes.data[0]))


def kl_divergence(mean: np.ndarray, log_variance: np.ndarray) -> float:
    """Closed-form KL(N(mean, diag exp(log_var)) || N(0, I))."""
    mean = np.asarray(mean, dtype=np.float64)
    lv = np.asarray(log_variance, dtype=np.float64)
    return float(-0.5 * np.sum(1.0 + lv - mean * mean - np.exp(lv)))


def vae_loss(pred, gt, latent: LatentCode, beta: float = 1e-4) -> float:
    """Reconstruction L1 plus beta-weighted KL.

    pred/gt may be arrays or {group: array} dicts; dicts contribute the mean
    of the per-group mean L1s, matching the training objective's equal
    group weighting.
    """
    if isinstance(pred, dict):
        groups = [float(np.mean(np.abs(np.asarray(pred[k], dtype=np.float64)
                                       - np.asarray(gt[k], dtype=np.float64))))
                  for k in sorted(pred)]
        recon = float(np.sum(groups))
    else:
        recon = float(np.mean(np.abs(np.asarray(pred, dtype=np.float64)
                                     - np.asarray(gt, dtype=np.float64))))
    return recon + beta * kl_divergence(latent.mean, latent.log_variance)


@dataclass
class VAEConfig:
    mode: str = MODE_ATTRIBUTES
    latent_dim: int = 64
    encoder_width: int = 256
    decoder_hidden: int = 256
    plane_res: int = 32
    channels: int = 16
    head_hidden: int = 128
    head_depth: int = 3
    scale_clip: float = 0.01
    steps: int = 5000
    queries_per_shape: int = 512
    lr: float = 1e-4
    beta: float = 1e-4
    seed: int = 0
    eval_every: int = 250
    checkpoint_every: int = 1000
    checkpoint_dir: str | None = None
    resample_every: int = 0  # 0 = train on the cached sample sets only
    weight_prob: float = 1.0
    weight_color: float = 1.0
    weight_rotation: float = 1.0
    weight_scale: float = 1.0
    weight_opacity: float = 1.0
    truncation: TruncationConfig = dc_field(default_factory=TruncationConfig)


@dataclass
class VAEModel:
    encoder: GSEncoder
    decoder: TriplaneDecoder
    heads: FieldHeads
    truncation: TruncationConfig

    def params(self) -> list[Tensor]:
        return self.encoder.params() + self.decoder.params() + self.heads.params()

    def field_for(self, splat_or_points, seed: int = 0,
                  use_mean: bool = True) -> NeuralField:
        """Encode one input and decode its field bundle."""
        code = encode(splat_or_points, self.encoder, seed)
        z = code.mean if use_mean else code.sample
        return self.field_from_latent(z)

    def field_from_latent(self, z: np.ndarray) -> NeuralField:
        return NeuralField(decode(z, self.decoder), self.heads, self.truncation)

    def state_tensors(self) -> dict:
        tensors = {"enc.point." + k.split(".", 1)[1]: v
                   for k, v in self.encoder.point_mlp.state_dict("p").items()}
        tensors.update({"enc.head." + k.split(".", 1)[1]: v
                        for k, v in self.encoder.head.state_dict("h").items()})
        tensors.update(self.decoder.mlp.state_dict("dec"))
        tensors.update(self.heads.pf.state_dict("pf"))
        tensors.update(self.heads.cf.state_dict("cf"))
        tensors.update(self.heads.tf.state_dict("tf"))
        return tensors

    def load_state(self, tensors: dict) -> None:
        self.encoder.point_mlp.load_state_dict(
            {"p." + k.split(".", 1)[1]: v for k, v in tensors.items()
             if k.startswith("enc.point.")}, "p")
        self.encoder.head.load_state_dict(
            {"h." + k.split(".", 1)[1]: v for k, v in tensors.items()
             if k.startswith("enc.head.")}, "h")
        self.decoder.mlp.load_state_dict(tensors, "dec")
        self.heads.pf.load_state_dict(tensors, "pf")
        self.heads.cf.load_state_dict(tensors, "cf")
        self.heads.tf.load_state_dict(tensors, "tf")


@dataclass
class VAEResult:
    model: VAEModel
    loss_curve: list
    val_prob_l1: list  # (step, per-shape list)
    aborted: bool = False


def build_vae(cfg: VAEConfig, rng: np.random.Generator) -> VAEModel:
    encoder = GSEncoder(cfg.mode, cfg.encoder_width, cfg.latent_dim, rng)
    decoder = TriplaneDecoder(cfg.latent_dim, cfg.plane_res, cfg.channels,
                              cfg.decoder_hidden, rng)
    heads = FieldHeads.create(3 * cfg.channels, cfg.head_hidden, cfg.head_depth,
                              cfg.scale_clip, rng)
    return VAEModel(encoder, decoder, heads, cfg.truncation)


def _pad_batch(rows_list: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(r) for r in rows_list])
    n_max = int(lengths.max())
    batch = np.zeros((len(rows_list), n_max, rows_list[0].shape[1]), dtype=np.float32)
    for i, rows in enumerate(rows_list):
        batch[i, :len(rows)] = rows
    return batch, lengths


def train_vae(dataset: list, cfg: VAEConfig | None = None,
              inputs: list | None = None) -> VAEResult:
    """Jointly train encoder, decoder, and heads on (splat, samples) pairs.

    `inputs` optionally overrides the encoder inputs (e.g. bare point clouds
    for the point-to-Gaussian variant); by default the splats' attribute
    rows are encoded. Deterministic per cfg.seed. A non-finite loss aborts
    training with the last good parameter snapshot restored.
    """
    cfg = cfg if cfg is not None else VAEConfig()
    if not dataset:
        raise DataError("train_vae needs a non-empty dataset")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    model = build_vae(cfg, rng)

    splats = [item[0] for item in dataset]
    samples: list[FieldSampleSet] = [item[1] for item in dataset]
    if inputs is None:
        enc_rows = [_encoder_input(s, cfg.mode) for s in splats]
    else:
        enc_rows = [_encoder_input(x, cfg.mode) for x in inputs]
    batch_rows, lengths = _pad_batch(enc_rows)
    b = len(dataset)

    params = model.params()
    opt = ad.Adam(params, lr=cfg.lr)
    loss_curve: list[float] = []
    val_curve: list = []
    snapshot = {p: p.data.copy() for p in params}
    snapshot_step = 0
    aborted = False

    def emit_checkpoint(tag: str):
        if cfg.checkpoint_dir is not None:
            import os
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            save_vae(model, cfg, f"{cfg.checkpoint_dir}/vae_{tag}.ckpt")

    for step in range(cfg.steps):
        if cfg.resample_every and step % cfg.resample_every == 0 and step > 0:
            from .fields_gt import sample_training_queries
            samples = [sample_training_queries(
                s, n_near=4 * cfg.queries_per_shape, n_uniform=cfg.queries_per_shape,
                seed=cfg.seed + 7919 * (step + 1) + i, cfg=cfg.truncation)
                for i, s in enumerate(splats)]
        m = cfg.queries_per_shape
        qs, labels = [], []
        for ss in samples:
            idx = rng.integers(0, ss.count, size=m)
            part = ss.subset(idx)
            qs.append(part.queries)
            labels.append(part)
        q_batch = np.stack(qs)  # (B, m, 3)
        merged = FieldSampleSet(
            queries=np.concatenate([p.queries for p in labels]),
            prob_labels=np.concatenate([p.prob_labels for p in labels]),
            color_labels=np.concatenate([p.color_labels for p in labels]),
            rotation_labels=np.concatenate([p.rotation_labels for p in labels]),
            scale_labels=np.concatenate([p.scale_labels for p in labels]),
            opacity_labels=np.concatenate([p.opacity_labels for p in labels]),
        )
        eps = rng.standard_normal((b, cfg.latent_dim)).astype(np.float32)
        with ad.Tape() as tape:
            mean_t, logvar_t = model.encoder.forward(batch_rows, lengths)
            std = ad.exp(ad.mul(logvar_t, 0.5))
            z = ad.add(mean_t, ad.mul(std, eps))
            planes = model.decoder.forward(z)
            feats = triplane_features(planes, q_batch)
            recon = attribute_losses(model.heads, feats, merged, cfg)
            kl_per_shape = ad.mul(
                ad.reduce_sum(
                    ad.sub(ad.add(ad.exp(logvar_t), ad.square(mean_t)),
                           ad.add(logvar_t, np.ones_like(logvar_t.data))),
                    axis=1),
                0.5)
            loss = ad.add(recon, ad.mul(ad.reduce_mean(kl_per_shape), cfg.beta))
            if not np.isfinite(loss.data):
                for p in params:
                    p.data = snapshot[p].copy()
                aborted = True
                emit_checkpoint("aborted")
                break
            grads = tape.backward(loss)
        opt.step(grads)
        loss_curve.append(float(loss.data))
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            per_shape = reconstruction_prob_l1(model, splats, samples)
            val_curve.append((step + 1, per_shape))
            snapshot = {p: p.data.copy() for p in params}
            snapshot_step = step + 1
        if cfg.checkpoint_dir is not None and (step + 1) % cfg.checkpoint_every == 0:
            emit_checkpoint(f"step{step + 1:06d}")
    emit_checkpoint("final")
    result = VAEResult(model, loss_curve, val_curve, aborted)
    if aborted and snapshot_step == 0:
        raise NumericalError("VAE training diverged before the first snapshot")
    return result


def reconstruction_prob_l1(model: VAEModel, splats: list, samples: list,
                           inputs: list | None = None) -> list[float]:
    """Per-shape probability-field L1 of the mean-latent reconstruction."""
    out = []
    for i, (splat, ss) in enumerate(zip(splats, samples)):
        src = inputs[i] if inputs is not None else splat
        fld = model.field_for(src)
        pred = fld.prob(ss.queries)
        out.append(float(np.mean(np.abs(pred - ss.prob_labels))))
    return out


def save_vae(model: VAEModel, cfg: VAEConfig, path) -> None:
    meta = {
        "kind": "vae",
        "mode": model.encoder.mode,
        "latent_dim": model.encoder.latent_dim,
        "encoder_width": model.encoder.width,
        "decoder_hidden": model.decoder.mlp.layers[0].weight.data.shape[1],
        "plane_res": model.decoder.plane_res,
        "channels": model.decoder.channels,
        "head_hidden": model.heads.pf.layers[0].weight.data.shape[1],
        "head_depth": len(model.heads.pf.layers) - 1,
        "scale_clip": model.heads.scale_clip,
        "d_trunc": model.truncation.d_trunc,
        "mapping": model.truncation.mapping,
    }
    save_tensors(path, model.state_tensors(), meta)


def load_vae(path) -> VAEModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "vae":
        raise DataError(f"{path}: checkpoint is not a VAE bundle")
    cfg = VAEConfig(
        mode=meta["mode"], latent_dim=meta["latent_dim"],
        encoder_width=meta["encoder_width"], decoder_hidden=meta["decoder_hidden"],
        plane_res=meta["plane_res"], channels=meta["channels"],
        head_hidden=meta["head_hidden"], head_depth=meta["head_depth"],
        scale_clip=meta["scale_clip"],
        truncation=TruncationConfig(meta["d_trunc"], meta["mapping"]),
    )
    model = build_vae(cfg, np.random.default_rng(0))
    model.load_state(tensors)
    return model
