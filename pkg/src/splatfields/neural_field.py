"""Triplane-conditioned neural splat fields.

Three heads decode a shared interpolated triplane feature: probability
(sigmoid scalar), color (sigmoid RGB), and transform (renormalized
quaternion, sigmoid-bounded scale, sigmoid opacity). The bilinear
interpolation is differentiable with respect to both the plane features and
the query position, which is what lets extraction run gradient ascent on
query coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .errors import DataError
from .fields_gt import FieldSampleSet, TruncationConfig
from .nn import MLP

# Plane order and the two kept coordinates per plane: XY, XZ, YZ.
_PLANE_COORDS = ((0, 1), (0, 2), (1, 2))


@dataclass
class FieldDiagnostics:
    """Counters for boundary clamps and frozen optimizer points."""

    clamped_queries: int = 0
    frozen_points: int = 0
    nonfinite_grads: int = 0


@dataclass
class Triplane:
    """Three axis-aligned feature planes, stored as one (3, H, W, C) tensor."""

    planes: Tensor

    def __post_init__(self):
        if self.planes.data.ndim != 4 or self.planes.data.shape[0] != 3:
            raise ValueError(f"triplane tensor must be (3, H, W, C), "
                             f"got {self.planes.data.shape}")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.planes.data.shape[1], self.planes.data.shape[2]

    @property
    def channels(self) -> int:
        return self.planes.data.shape[3]

    @property
    def feature_dim(self) -> int:
        return 3 * self.channels

    @classmethod
    def create(cls, h: int = 32, w: int = 32, c: int = 16,
               rng: np.random.Generator | None = None, init_std: float = 0.02,
               trainable: bool = True) -> "Triplane":
        if rng is None or init_std == 0.0:
            data = np.zeros((3, h, w, c), dtype=np.float32)
        else:
            data = rng.normal(0.0, init_std, size=(3, h, w, c)).astype(np.float32)
        return cls(Tensor(data, requires_grad=trainable))


def _grid_cells(u: np.ndarray, n: int):
    """Cell index and fraction for grid coordinates in [0, n-1].

    At an exact interior knot the containing cell is the lower one, so
    one-sided gradients there come from the lower cell.
    """
    ui = np.floor(u)
    lower_tie = (u == ui) & (ui > 0)
    i0 = (ui - lower_tie).astype(np.int64)
    np.clip(i0, 0, n - 2, out=i0)
    return i0, (u - i0).astype(np.float32)


def triplane_features(planes: Tensor, q, diagnostics: FieldDiagnostics | None = None) -> Tensor:
    """Bilinear triplane lookup, concatenated per plane in XY|XZ|YZ order.

    `planes` is (3, H, W, C) or batched (B, 3, H, W, C); `q` is (M, 3) or
    (B, M, 3) matching. Returns a (B*M, 3C) tensor. Queries outside
    [-1, 1]^3 are clamped to the boundary (and counted in diagnostics);
    their position gradient is zeroed on the clamped coordinates.
    """
    pdata = planes.data
    batched = pdata.ndim == 5
    if not batched:
        pdata = pdata[None]
    b, _, h, w, c = pdata.shape

    q_tensor = q if isinstance(q, Tensor) else None
    qd = np.asarray(q.data if q_tensor is not None else q, dtype=np.float32)
    qd = qd.reshape(b, -1, 3)
    m = qd.shape[1]

    inside = (qd >= -1.0) & (qd <= 1.0)
    if diagnostics is not None:
        diagnostics.clamped_queries += int(np.count_nonzero(~inside.all(axis=2)))
    qc = np.clip(qd, -1.0, 1.0)

    rows = np.repeat(np.arange(b, dtype=np.int64), m)
    flat_q = qc.reshape(-1, 3)
    flat_mask = inside.reshape(-1, 3)

    outs = []
    saved = []
    for k, (ca, cb) in enumerate(_PLANE_COORDS):
        ua = (flat_q[:, ca] + 1.0) * 0.5 * (h - 1)
        ub = (flat_q[:, cb] + 1.0) * 0.5 * (w - 1)
        ia, fa = _grid_cells(ua, h)
        ib, fb = _grid_cells(ub, w)
        plane = pdata[:, k]  # (B, H, W, C)
        p00 = plane[rows, ia, ib]
        p10 = plane[rows, ia + 1, ib]
        p01 = plane[rows, ia, ib + 1]
        p11 = plane[rows, ia + 1, ib + 1]
        fa_ = fa[:, None]
        fb_ = fb[:, None]
        out = p00 * ((1 - fa_) * (1 - fb_))
        out += p10 * (fa_ * (1 - fb_))
        out += p01 * ((1 - fa_) * fb_)
        out += p11 * (fa_ * fb_)
        outs.append(out)
        saved.append((ca, cb, ia, ib, fa_, fb_, p00, p10, p01, p11))

    out_data = np.concatenate(outs, axis=1)

    def backward(g):
        g_planes = None
        if planes.requires_grad:
            g_planes = np.zeros_like(pdata)
        g_q = None
        if q_tensor is not None and q_tensor.requires_grad:
            g_q = np.zeros_like(flat_q)
        for k, (ca, cb, ia, ib, fa_, fb_, p00, p10, p01, p11) in enumerate(saved):
            gk = g[:, k * c:(k + 1) * c]
            if g_planes is not None:
                gp = g_planes[:, k]
                np.add.at(gp, (rows, ia, ib), gk * (1 - fa_) * (1 - fb_))
                np.add.at(gp, (rows, ia + 1, ib), gk * fa_ * (1 - fb_))
                np.add.at(gp, (rows, ia, ib + 1), gk * (1 - fa_) * fb_)
                np.add.at(gp, (rows, ia + 1, ib + 1), gk * fa_ * fb_)
            if g_q is not None:
                d_fa = ((p10 - p00) * (1 - fb_) + (p11 - p01) * fb_)
                d_fb = ((p01 - p00) * (1 - fa_) + (p11 - p10) * fa_)
                scale_a = 0.5 * (h - 1)
                scale_b = 0.5 * (w - 1)
                g_q[:, ca] += (gk * d_fa).sum(axis=1) * scale_a * flat_mask[:, ca]
                g_q[:, cb] += (gk * d_fb).sum(axis=1) * scale_b * flat_mask[:, cb]
        if g_q is not None:
            g_q = g_q.reshape(q_tensor.data.shape)
        return g_planes.reshape(planes.data.shape) if g_planes is not None else None, g_q

    return ad.record((planes, q if q_tensor is not None else qd), out_data, backward)


@dataclass
class FieldHeads:
    """The three per-query predictors applied to interpolated features."""

    pf: MLP
    cf: MLP
    tf: MLP
    scale_clip: float = 0.01

    @classmethod
    def create(cls, feature_dim: int, hidden: int = 128, depth: int = 3,
               scale_clip: float = 0.01,
               rng: np.random.Generator | None = None) -> "FieldHeads":
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [feature_dim] + [hidden] * depth
        # Zero-initialized output layers: probability/color/opacity start at
        # 0.5 and the raw quaternion bias (1,0,0,0) makes the initial
        # rotation the identity.
        tf_bias = np.array([1, 0, 0, 0, 0, 0, 0, 0], dtype=np.float32)
        return cls(
            pf=MLP(sizes + [1], rng, zero_init_last=True),
            cf=MLP(sizes + [3], rng, zero_init_last=True),
            tf=MLP(sizes + [8], rng, zero_init_last=True, last_bias=tf_bias),
            scale_clip=scale_clip,
        )

    def params(self) -> list[Tensor]:
        return self.pf.params() + self.cf.params() + self.tf.params()

    def forward_pf(self, features: Tensor) -> Tensor:
        return ad.sigmoid(self.pf(features))

    def forward_attrs(self, features: Tensor) -> dict:
        color = ad.sigmoid(self.cf(features))
        raw = self.tf(features)
        quat_raw = ad.slice_axis(raw, 0, 4)
        norm = ad.sqrt(ad.add(ad.reduce_sum(ad.square(quat_raw), axis=-1, keepdims=True),
                              np.full((quat_raw.shape[0], 1), 1e-12, dtype=np.float32)))
        quat = ad.div(quat_raw, norm)
        scale = ad.mul(ad.sigmoid(ad.slice_axis(raw, 4, 7)), float(self.scale_clip))
        opacity = ad.sigmoid(ad.slice_axis(raw, 7, 8))
        return {"color": color, "rotation": quat, "scale": scale, "opacity": opacity}


def interpolate(triplane: Triplane, q, diagnostics: FieldDiagnostics | None = None) -> np.ndarray:
    """Concatenated per-plane bilinear features at 3D query points."""
    q_arr = np.asarray(q, dtype=np.float32)
    out = triplane_features(triplane.planes, np.atleast_2d(q_arr), diagnostics).data
    return out[0] if q_arr.ndim == 1 else out


def eval_pf(triplane: Triplane, heads: FieldHeads, q,
            diagnostics: FieldDiagnostics | None = None):
    """Probability field value(s) in [0, 1] at query point(s)."""
    q_arr = np.asarray(q, dtype=np.float32)
    feats = triplane_features(triplane.planes, np.atleast_2d(q_arr), diagnostics)
    p = heads.forward_pf(feats).data[:, 0]
    return float(p[0]) if q_arr.ndim == 1 else p


def eval_attrs(triplane: Triplane, heads: FieldHeads, q,
               diagnostics: FieldDiagnostics | None = None) -> dict:
    """Color / rotation / scale / opacity at query point(s).

    Outputs satisfy the Gaussian attribute invariants by construction: unit
    quaternion, scale in (0, scale_clip), opacity and color in [0, 1].
    """
    q_arr = np.asarray(q, dtype=np.float32)
    feats = triplane_features(triplane.planes, np.atleast_2d(q_arr), diagnostics)
    attrs = heads.forward_attrs(feats)
    out = {k: (v.data[:, 0] if k == "opacity" else v.data) for k, v in attrs.items()}
    if q_arr.ndim == 1:
        out = {k: (float(v[0]) if k == "opacity" else v[0]) for k, v in out.items()}
    return out


def grad_position(triplane: Triplane, heads: FieldHeads, q,
                  diagnostics: FieldDiagnostics | None = None) -> np.ndarray:
    """Analytic gradient of the probability field with respect to position.

    Computed by reverse mode through the head MLP and the bilinear lookup;
    at cell boundaries the one-sided gradient of the lower cell is returned.
    """
    q_arr = np.asarray(q, dtype=np.float32)
    qt = Tensor(np.atleast_2d(q_arr), requires_grad=True)
    with ad.frozen_params([triplane.planes] + heads.params()):
        with ad.Tape() as tape:
            feats = triplane_features(triplane.planes, qt, diagnostics)
            p = heads.forward_pf(feats)
            tape.backward(ad.reduce_sum(p))
    g = qt.grad if qt.grad is not None else np.zeros_like(qt.data)
    return g[0] if q_arr.ndim == 1 else g


@dataclass
class NeuralField:
    """A fitted or decoded field bundle satisfying the field protocol."""

    triplane: Triplane
    heads: FieldHeads
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    diagnostics: FieldDiagnostics = field(default_factory=FieldDiagnostics)
    eval_chunk: int = 65536

    def _chunks(self, q: np.ndarray):
        q = np.asarray(q, dtype=np.float32).reshape(-1, 3)
        for i in range(0, len(q), self.eval_chunk):
            yield q[i:i + self.eval_chunk]

    def prob(self, q) -> np.ndarray:
        parts = [eval_pf(self.triplane, self.heads, chunk, self.diagnostics)
                 for chunk in self._chunks(q)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)

    def prob_grad(self, q) -> np.ndarray:
        parts = [grad_position(self.triplane, self.heads, chunk, self.diagnostics)
                 for chunk in self._chunks(q)]
        return np.concatenate(parts) if parts else np.zeros((0, 3), dtype=np.float32)

    def attrs(self, q) -> dict:
        parts = [eval_attrs(self.triplane, self.heads, chunk, self.diagnostics)
                 for chunk in self._chunks(q)]
        return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


@dataclass
class FitConfig:
    """Hyperparameters for fitting one field directly to one splat."""

    plane_res: int = 32
    channels: int = 16
    hidden: int = 128
    depth: int = 3
    steps: int = 2000
    batch: int = 1024
    lr: float = 3e-3
    seed: int = 0
    val_fraction: float = 0.1
    eval_every: int = 100
    plane_init_std: float = 0.02
    scale_clip: float = 0.01
    weight_prob: float = 1.0
    weight_color: float = 1.0
    weight_rotation: float = 1.0
    weight_scale: float = 1.0
    weight_opacity: float = 1.0
    truncation: TruncationConfig = field(default_factory=TruncationConfig)


@dataclass
class FitResult:
    field: NeuralField
    loss_curve: list
    val_prob_l1: list  # (step, value) pairs


def align_quaternion_targets(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Flip target quaternions whose dot with the prediction is negative
    (q and -q encode the same rotation)."""
    dots = np.sum(pred * target, axis=-1, keepdims=True)
    return np.where(dots < 0, -target, target).astype(np.float32)


def attribute_losses(heads: FieldHeads, feats: Tensor, batch: FieldSampleSet,
                     cfg) -> Tensor:
    """Weighted sum of per-group L1 losses for one labeled batch."""
    p = heads.forward_pf(feats)
    attrs = heads.forward_attrs(feats)
    quat_target = align_quaternion_targets(attrs["rotation"].data, batch.rotation_labels)
    loss = ad.mul(ad.l1_loss(p, batch.prob_labels[:, None]), cfg.weight_prob)
    loss = ad.add(loss, ad.mul(ad.l1_loss(attrs["color"], batch.color_labels),
                               cfg.weight_color))
    loss = ad.add(loss, ad.mul(ad.l1_loss(attrs["rotation"], quat_target),
                               cfg.weight_rotation))
    loss = ad.add(loss, ad.mul(ad.l1_loss(attrs["scale"], batch.scale_labels),
                               cfg.weight_scale))
    loss = ad.add(loss, ad.mul(ad.l1_loss(attrs["opacity"], batch.opacity_labels[:, None]),
                               cfg.weight_opacity))
    return loss


def fit_field(splat, samples: FieldSampleSet, cfg: FitConfig | None = None) -> FitResult:
    """Fit triplane features and heads to one splat's labeled samples.

    Plain Adam on the weighted per-group L1 of Gaussian attributes versus
    the cached labels. Deterministic per cfg.seed.
    """
    cfg = cfg if cfg is not None else FitConfig()
    if samples.count == 0:
        raise DataError("cannot fit a field on an empty sample set")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    triplane = Triplane.create(cfg.plane_res, cfg.plane_res, cfg.channels,
                               rng, cfg.plane_init_std)
    heads = FieldHeads.create(triplane.feature_dim, cfg.hidden, cfg.depth,
                              cfg.scale_clip, rng)
    perm = rng.permutation(samples.count)
    n_val = min(int(samples.count * cfg.val_fraction), samples.count - 1)
    val = samples.subset(perm[:n_val]) if n_val > 0 else None
    train = samples.subset(perm[n_val:])

    params = [triplane.planes] + heads.params()
    opt = ad.Adam(params, lr=cfg.lr)
    loss_curve = []
    val_curve = []
    field_bundle = NeuralField(triplane, heads, cfg.truncation)
    for step in range(cfg.steps):
        idx = rng.integers(0, train.count, size=min(cfg.batch, train.count))
        batch = train.subset(idx)
        with ad.Tape() as tape:
            feats = triplane_features(triplane.planes, batch.queries)
            loss = attribute_losses(heads, feats, batch, cfg)
            grads = tape.backward(loss)
        opt.step(grads)
        loss_curve.append(float(loss.data))
        if val is not None and ((step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1):
            pv = field_bundle.prob(val.queries)
            val_curve.append((step + 1, float(np.mean(np.abs(pv - val.prob_labels)))))
    return FitResult(field=field_bundle, loss_curve=loss_curve, val_prob_l1=val_curve)


def save_field(field_bundle: NeuralField, path) -> None:
    h, w = field_bundle.triplane.resolution
    heads = field_bundle.heads
    tensors = {"triplane": field_bundle.triplane.planes.data}
    tensors.update(heads.pf.state_dict("pf"))
    tensors.update(heads.cf.state_dict("cf"))
    tensors.update(heads.tf.state_dict("tf"))
    meta = {
        "kind": "field",
        "plane_h": h, "plane_w": w, "channels": field_bundle.triplane.channels,
        "hidden": heads.pf.layers[0].weight.data.shape[1],
        "depth": len(heads.pf.layers) - 1,
        "scale_clip": heads.scale_clip,
        "d_trunc": field_bundle.truncation.d_trunc,
        "mapping": field_bundle.truncation.mapping,
    }
    save_tensors(path, tensors, meta)


def load_field(path) -> NeuralField:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "field":
        raise DataError(f"{path}: checkpoint is not a field bundle")
    triplane = Triplane(Tensor(tensors["triplane"]))
    heads = FieldHeads.create(triplane.feature_dim, meta["hidden"], meta["depth"],
                              meta["scale_clip"])
    heads.pf.load_state_dict(tensors, "pf")
    heads.cf.load_state_dict(tensors, "cf")
    heads.tf.load_state_dict(tensors, "tf")
    return NeuralField(triplane, heads,
                       TruncationConfig(meta["d_trunc"], meta["mapping"]))
