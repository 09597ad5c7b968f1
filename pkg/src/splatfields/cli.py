"""Command-line pipeline: preprocess, label caching, training, generation,
extraction, and metrics.

Every command is deterministic for a fixed config + seed, writes outputs
atomically, and exits nonzero with a machine-readable JSON error line on
stderr: 1 for usage problems, 2 for data/format problems, 3 for numerical
aborts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import diffusion, extraction, fields_gt, metrics, ply, vae
from .config import PipelineConfig, stage_seed
from .errors import (DataError, EmptyFieldError, FormatError, NumericalError,
                     SplatFieldsError)
from .fields_gt import TruncationConfig
from .neural_field import FitConfig, fit_field, load_field, save_field
from .splats import clip_scales, normalize

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    pass


def _atomic_json(path, payload: dict) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _load_config(args) -> PipelineConfig:
    try:
        cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        overrides = {k: getattr(args, k) for k in PipelineConfig.field_names()
                     if hasattr(args, k)}
        return cfg.override(overrides)
    except FormatError as e:
        # Config mistakes are usage problems, not data problems.
        raise UsageError(str(e)) from e


def _announce(command: str, cfg: PipelineConfig, io: dict, dry_run: bool) -> bool:
    plan = {"command": command, "config": cfg.resolved(), "io": io}
    print(json.dumps(plan, sort_keys=True))
    return dry_run


def _truncation(cfg: PipelineConfig) -> TruncationConfig:
    return TruncationConfig(d_trunc=cfg.d_trunc, mapping=cfg.mapping)


def _read_manifest(path) -> list[list[str]]:
    rows = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cols = [c if os.path.isabs(c) else os.path.join(base, c)
                    for c in line.split()]
            rows.append(cols)
    if not rows:
        raise DataError(f"{path}: manifest is empty")
    return rows


def _load_points(path) -> np.ndarray:
    if str(path).endswith(".npy"):
        pts = np.load(path)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"{path}: expected an (N, 3) array")
        return np.asarray(pts, dtype=np.float32)
    if str(path).endswith(".ply"):
        return ply.load_ply_points(path)
    pts = np.loadtxt(path, dtype=np.float64)
    return np.atleast_2d(pts)[:, :3].astype(np.float32)


# ------------------------------------------------------------------ commands

def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    if _announce("preprocess", cfg, {"in": args.input, "out": args.out}, args.dry_run):
        return 0
    splat = ply.load_ply(args.input)
    splat = clip_scales(normalize(splat), cfg.scale_clip)
    ply.save_ply(splat, args.out)
    return 0


def cmd_sample_labels(args) -> int:
    cfg = _load_config(args)
    if _announce("sample-labels", cfg, {"in": args.input, "out": args.out}, args.dry_run):
        return 0
    splat = ply.load_ply(args.input)
    samples = fields_gt.sample_training_queries(
        splat, cfg.n_near, cfg.n_uniform, cfg.near_sigma,
        seed=stage_seed(cfg.seed, "sample-labels"), cfg=_truncation(cfg))
    fields_gt.save_sample_set(samples, args.out)
    return 0


def cmd_fit_field(args) -> int:
    cfg = _load_config(args)
    io = {"in": args.input, "samples": args.samples, "out": args.out}
    if _announce("fit-field", cfg, io, args.dry_run):
        return 0
    splat = ply.load_ply(args.input)
    samples = fields_gt.load_sample_set(args.samples)
    fit_cfg = FitConfig(
        plane_res=cfg.plane_res, channels=cfg.channels, hidden=cfg.head_hidden,
        depth=cfg.head_depth, steps=cfg.fit_steps, batch=cfg.fit_batch,
        lr=cfg.fit_lr, seed=stage_seed(cfg.seed, "fit-field"),
        scale_clip=cfg.scale_clip, truncation=_truncation(cfg))
    result = fit_field(splat, samples, fit_cfg)
    save_field(result.field, args.out)
    if args.stats:
        _atomic_json(args.stats, {
            "final_loss": result.loss_curve[-1],
            "val_prob_l1": result.val_prob_l1,
        })
    return 0


def _vae_config(cfg: PipelineConfig, mode: str) -> vae.VAEConfig:
    return vae.VAEConfig(
        mode=mode, latent_dim=cfg.latent_dim, encoder_width=cfg.encoder_width,
        decoder_hidden=cfg.decoder_hidden, plane_res=cfg.plane_res,
        channels=cfg.channels, head_hidden=cfg.head_hidden,
        head_depth=cfg.head_depth, scale_clip=cfg.scale_clip,
        steps=cfg.vae_steps, queries_per_shape=cfg.queries_per_shape,
        lr=cfg.vae_lr, beta=cfg.beta, seed=stage_seed(cfg.seed, "train-vae"),
        truncation=_truncation(cfg))


def cmd_train_vae(args) -> int:
    cfg = _load_config(args)
    io = {"manifest": args.manifest, "out": args.out, "mode": args.mode}
    if _announce("train-vae", cfg, io, args.dry_run):
        return 0
    rows = _read_manifest(args.manifest)
    dataset = []
    inputs = [] if args.mode == vae.MODE_POINTS else None
    for cols in rows:
        if len(cols) < 2:
            raise DataError("manifest rows need: splat.ply samples.bin [points]")
        splat = ply.load_ply(cols[0])
        dataset.append((splat, fields_gt.load_sample_set(cols[1])))
        if inputs is not None:
            inputs.append(_load_points(cols[2]) if len(cols) > 2
                          else splat.centers.copy())
    result = vae.train_vae(dataset, _vae_config(cfg, args.mode), inputs=inputs)
    vae.save_vae(result.model, _vae_config(cfg, args.mode), args.out)
    if result.aborted:
        raise NumericalError("VAE training aborted on non-finite loss; "
                             "last good checkpoint written")
    return 0


def cmd_train_ldm(args) -> int:
    cfg = _load_config(args)
    io = {"vae": args.vae, "manifest": args.manifest, "out": args.out,
          "cond": args.cond}
    if _announce("train-ldm", cfg, io, args.dry_run):
        return 0
    model = vae.load_vae(args.vae)
    rows = _read_manifest(args.manifest)
    latents, partials, embeddings = [], [], []
    for i, cols in enumerate(rows):
        splat = ply.load_ply(cols[0])
        code = vae.encode(splat, model.encoder,
                          seed=stage_seed(cfg.seed, f"encode-{i}"))
        latents.append(code.mean)
        if args.cond == "partial":
            partials.append(diffusion.make_partial(
                splat, seed=stage_seed(cfg.seed, f"partial-{i}")))
        elif args.cond == "files":
            if len(cols) < 3:
                raise DataError("manifest rows need an embedding file in "
                                "'files' conditioning mode")
            embeddings.append(diffusion.read_condition_vector(cols[2]))
    ldm_cfg = diffusion.LDMConfig(
        latent_dim=cfg.latent_dim, cond_dim=cfg.cond_dim, hidden=cfg.ldm_hidden,
        depth=cfg.ldm_depth, t_steps=cfg.t_steps, beta_start=cfg.beta_start,
        beta_end=cfg.beta_end, steps=cfg.ldm_steps, batch=cfg.ldm_batch,
        lr=cfg.ldm_lr, seed=stage_seed(cfg.seed, "train-ldm"),
        cond_dropout=cfg.cond_dropout)
    result = diffusion.train_ldm(
        np.stack(latents), ldm_cfg,
        partials=partials if args.cond == "partial" else None,
        file_embeddings=np.stack(embeddings) if args.cond == "files" else None)
    diffusion.save_ldm(result.model, args.out)
    if result.aborted:
        raise NumericalError("LDM training aborted on non-finite loss")
    return 0


def _extract_to_ply(fld, cfg: PipelineConfig, seed: int, out, stats_path) -> None:
    octree_cfg = extraction.OctreeConfig(
        max_depth=cfg.octree_depth, threshold=cfg.theta,
        samples_per_axis=cfg.samples_per_axis, target_count=cfg.n_gaussians)
    stats = extraction.ExtractionStats()
    splat = extraction.extract_splat(fld, octree_cfg, seed=seed,
                                     refine_steps=cfg.refine_steps,
                                     refine_lr=cfg.refine_lr, stats=stats)
    ply.save_ply(splat, out)
    if stats_path:
        _atomic_json(stats_path, stats.to_dict())


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    sources = [s for s, used in
               [("uncond", args.uncond), ("cond", args.cond is not None),
                ("partial", args.partial is not None)] if used]
    if len(sources) != 1:
        raise UsageError("choose exactly one of --uncond, --cond, --partial")
    io = {"ldm": args.ldm, "vae": args.vae, "out": args.out, "source": sources[0]}
    if _announce("generate", cfg, io, args.dry_run):
        return 0
    ldm = diffusion.load_ldm(args.ldm)
    gvae = vae.load_vae(args.vae)
    cond = None
    if args.cond is not None:
        if ldm.projector is None:
            raise DataError("LDM was not trained with file conditioning")
        cond = diffusion.load_condition_file(args.cond, ldm.projector)
    elif args.partial is not None:
        if ldm.partial_encoder is None:
            raise DataError("LDM was not trained with partial-splat conditioning")
        cond = diffusion.embed_partial(ply.load_ply(args.partial), ldm.partial_encoder)
    z = diffusion.p_sample_loop(ldm.denoiser, cond, ldm.schedule,
                                seed=stage_seed(cfg.seed, "generate"),
                                guidance_scale=cfg.guidance_scale)
    fld = gvae.field_from_latent(z)
    _extract_to_ply(fld, cfg, stage_seed(cfg.seed, "extract"), args.out, args.stats)
    return 0


def cmd_complete(args) -> int:
    args.uncond = False
    args.cond = None
    return cmd_generate(args)


def cmd_p2g(args) -> int:
    cfg = _load_config(args)
    io = {"vae": args.vae, "points": args.points, "out": args.out}
    if _announce("p2g", cfg, io, args.dry_run):
        return 0
    model = vae.load_vae(args.vae)
    if model.encoder.mode != vae.MODE_POINTS:
        raise DataError("p2g needs a VAE trained in 'points' mode")
    pts = _load_points(args.points)
    fld = model.field_for(pts, seed=stage_seed(cfg.seed, "p2g"))
    _extract_to_ply(fld, cfg, stage_seed(cfg.seed, "extract"), args.out, args.stats)
    return 0


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    io = {"field": args.field, "out": args.out}
    if _announce("extract", cfg, io, args.dry_run):
        return 0
    fld = load_field(args.field)
    _extract_to_ply(fld, cfg, stage_seed(cfg.seed, "extract"), args.out, args.stats)
    return 0


def cmd_metrics(args) -> int:
    cfg = _load_config(args)
    io = {"ply_a": args.ply_a, "ply_b": args.ply_b, "field": args.field,
          "gt_ply": args.gt_ply, "out": args.out}
    if _announce("metrics", cfg, io, args.dry_run):
        return 0
    report = metrics.MetricReport()
    if args.ply_a and args.ply_b:
        a = ply.load_ply(args.ply_a)
        b = ply.load_ply(args.ply_b)
        report.chamfer = metrics.chamfer(a.centers, b.centers)
        report.counts["ply_a"] = a.count
        report.counts["ply_b"] = b.count
    if args.field and args.gt_ply:
        fld = load_field(args.field)
        gt = ply.load_ply(args.gt_ply)
        index = fields_gt.build_index(gt)
        report.field_l1_prob = metrics.field_l1(
            fld, index, gt, _truncation(cfg), n_queries=cfg.metric_queries,
            seed=stage_seed(cfg.seed, "metrics"))
        report.attr_errors = metrics.attr_error(fld, gt, index)
        report.counts["gt"] = gt.count
    if report.chamfer is None and report.field_l1_prob is None:
        raise UsageError("metrics needs --ply-a/--ply-b and/or --field/--gt-ply")
    _atomic_json(args.out, report.to_dict())
    return 0


# -------------------------------------------------------------------- parser

def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved plan and exit without side effects")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)


def _num_flag(p: _Parser, name: str, kind=float) -> None:
    p.add_argument(name, type=kind, default=None,
                   dest=name.lstrip("-").replace("-", "_"))


def build_parser() -> _Parser:
    parser = _Parser(prog="splatfields",
                     description="Continuous-field splat modeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize + clip a fitted splat")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _num_flag(p, "--scale-clip")
    _add_common(p)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("sample-labels", help="cache labeled training queries")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _num_flag(p, "--n-near", int)
    _num_flag(p, "--n-uniform", int)
    _num_flag(p, "--near-sigma")
    _num_flag(p, "--d-trunc")
    p.add_argument("--mapping", choices=["linear", "exponent"], default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_sample_labels)

    p = sub.add_parser("fit-field", help="fit a field directly to one splat")
    p.add_argument("input")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", default=None)
    for flag, kind in [("--plane-res", int), ("--channels", int),
                       ("--head-hidden", int), ("--head-depth", int),
                       ("--fit-steps", int), ("--fit-batch", int),
                       ("--fit-lr", float), ("--d-trunc", float)]:
        _num_flag(p, flag, kind)
    p.add_argument("--mapping", choices=["linear", "exponent"], default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_fit_field)

    p = sub.add_parser("train-vae", help="train the splat VAE on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=[vae.MODE_ATTRIBUTES, vae.MODE_POINTS],
                   default=vae.MODE_ATTRIBUTES)
    for flag, kind in [("--latent-dim", int), ("--encoder-width", int),
                       ("--decoder-hidden", int), ("--plane-res", int),
                       ("--channels", int), ("--head-hidden", int),
                       ("--vae-steps", int), ("--queries-per-shape", int),
                       ("--vae-lr", float), ("--beta", float)]:
        _num_flag(p, flag, kind)
    _add_common(p)
    p.set_defaults(fn=cmd_train_vae)

    p = sub.add_parser("train-ldm", help="train latent diffusion over VAE codes")
    p.add_argument("--vae", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cond", choices=["none", "partial", "files"], default="none")
    for flag, kind in [("--cond-dim", int), ("--ldm-hidden", int),
                       ("--ldm-depth", int), ("--t-steps", int),
                       ("--ldm-steps", int), ("--ldm-batch", int),
                       ("--ldm-lr", float), ("--beta-start", float),
                       ("--beta-end", float), ("--cond-dropout", float)]:
        _num_flag(p, flag, kind)
    _add_common(p)
    p.set_defaults(fn=cmd_train_ldm)

    def extraction_flags(p):
        for flag, kind in [("--n-gaussians", int), ("--octree-depth", int),
                           ("--theta", float), ("--samples-per-axis", int),
                           ("--refine-steps", int), ("--refine-lr", float)]:
            _num_flag(p, flag, kind)
        p.add_argument("--stats", default=None,
                       help="JSON sidecar for extraction statistics")

    p = sub.add_parser("generate", help="sample a latent and extract a splat")
    p.add_argument("--ldm", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--uncond", action="store_true")
    p.add_argument("--cond", default=None, help="condition-embedding file")
    p.add_argument("--partial", default=None, help="partial splat PLY")
    p.add_argument("--n", type=int, dest="n_gaussians", default=None)
    _num_flag(p, "--guidance-scale")
    extraction_flags(p)
    _add_common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("complete", help="complete a partial splat")
    p.add_argument("--ldm", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--partial", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, dest="n_gaussians", default=None)
    _num_flag(p, "--guidance-scale")
    extraction_flags(p)
    _add_common(p)
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("p2g", help="point cloud to splat via a points-mode VAE")
    p.add_argument("--vae", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, dest="n_gaussians", default=None)
    extraction_flags(p)
    _add_common(p)
    p.set_defaults(fn=cmd_p2g)

    p = sub.add_parser("extract", help="discretize a fitted field checkpoint")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, dest="n_gaussians", default=None)
    p.add_argument("--depth", type=int, dest="octree_depth", default=None)
    extraction_flags(p)
    _add_common(p)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("metrics", help="geometry/field metrics report")
    p.add_argument("--ply-a", default=None)
    p.add_argument("--ply-b", default=None)
    p.add_argument("--field", default=None)
    p.add_argument("--gt-ply", default=None)
    p.add_argument("--out", required=True)
    _num_flag(p, "--metric-queries", int)
    _add_common(p)
    p.set_defaults(fn=cmd_metrics)

    return parser


def _fail(code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": message, "code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads:
            os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
        return args.fn(args)
    except UsageError as e:
        return _fail(EXIT_USAGE, str(e))
    except (FormatError, DataError, EmptyFieldError) as e:
        return _fail(EXIT_DATA, str(e))
    except (NumericalError,) as e:
        return _fail(EXIT_NUMERICAL, str(e))
    except FileNotFoundError as e:
        return _fail(EXIT_DATA, f"missing file: {e.filename}")
    except SplatFieldsError as e:
        return _fail(EXIT_DATA, str(e))


if __name__ == "__main__":
    sys.exit(main())
