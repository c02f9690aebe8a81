"""Command-line entry point.

Subcommands: gen-data, train-ssl, extract-keypoints, visualize-attention,
train-inpaint, infer, eval. Every command loads an ExperimentConfig (flat
key = value file, overridable by flags), writes its outputs under the out
directory, and drops a manifest.json (config snapshot, seed, input content
hashes) sufficient to re-run it bit-identically.

Exit codes: 0 success, 1 config/data error, 2 usage, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import diffusion, synthdata, viz
from .config import ExperimentConfig, load_config, parse_override
from .distill import ssl_train
from .errors import ConfigurationError, DataError, NumericalError
from .keypoints import keypoint_crop_boxes, cluster_keypoints, merge_heads
from .metrics import embed_stats, frechet_embed_distance, ssim
from .vit import ViT, extract_class_attention, load_checkpoint, save_checkpoint, vit_forward

COMMANDS = ("gen-data", "train-ssl", "extract-keypoints", "visualize-attention",
            "train-inpaint", "infer", "eval")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dataset_hash(index) -> str:
    digest = hashlib.sha256()
    for rec in index.records:
        for rel in (rec.person, rec.garment, rec.mask, rec.truth):
            p = index.root / rel
            if p.exists():
                digest.update(rel.encode())
                digest.update(p.read_bytes())
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig,
                    inputs: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": cfg["seed"],
        "config": cfg.to_flat_dict(),
        "inputs": inputs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_dataset(cfg: ExperimentConfig):
    root = Path(cfg["data.root"])
    if not root.exists():
        raise DataError(f"dataset root does not exist: {root}")
    return synthdata.load_index(root)


def _load_teacher(cfg: ExperimentConfig) -> ViT:
    path = cfg["ssl.checkpoint"]
    if not path:
        raise ConfigurationError("ssl.checkpoint must point at a trained teacher")
    return load_checkpoint(path)


def _garment_images(index, split):
    recs = index.split(split) or index.records
    return [synthdata.load_image(index.resolve(r.garment)) for r in recs], recs


def _condition_fn(teacher: ViT):
    def enc(garment):
        emb, _, _ = vit_forward(teacher, garment)
        return emb.tokens
    return enc


def _class_embed_fn(teacher: ViT):
    def enc(image):
        emb, _, _ = vit_forward(teacher, image)
        return emb.class_token
    return enc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig) -> int:
    root = Path(cfg["data.root"])
    index = synthdata.gen_synthetic_dataset(
        cfg["data.n_pairs"], cfg["data.image_size"], cfg["seed"], root,
        n_test=cfg["data.n_test"])
    out = Path(cfg["out_dir"]) / "gen-data"
    _write_manifest(out, "gen-data", cfg, {"dataset": _dataset_hash(index)})
    print(f"wrote {len(index.records)} pairs to {root}")
    return 0


def cmd_train_ssl(cfg: ExperimentConfig) -> int:
    index = _load_dataset(cfg)
    garments, _ = _garment_images(index, "train")
    out = Path(cfg["out_dir"]) / "train-ssl"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    teacher_state, log = ssl_train(
        garments, cfg.vit_config(), cfg.distill_config(),
        crop_mode=cfg["crop_mode"], rng=rng, out_dir=out,
        global_policy=cfg.augment_policy("global"),
        local_policy=cfg.augment_policy("local"))
    final = out / "teacher_final.npz"
    save_checkpoint(teacher_state.model, final, tag="teacher")
    viz.save_loss_curve(log, out / "loss_curve.png", title="ssl loss")
    _write_manifest(out, "train-ssl", cfg, {"dataset": _dataset_hash(index)})
    last = [r for r in log if "loss" in r][-1]
    print(f"final ssl loss {last['loss']:.4f}; teacher at {final}")
    return 0


def cmd_extract_keypoints(cfg: ExperimentConfig) -> int:
    index = _load_dataset(cfg)
    teacher = _load_teacher(cfg)
    garments, recs = _garment_images(index, "test")
    out = Path(cfg["out_dir"]) / "keypoints"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    n_crops = cfg["ssl.local_crops"]
    for rec, img in zip(recs, garments):
        att = extract_class_attention(teacher, img, cfg["ssl.keypoint_layer"])
        pts = merge_heads(att, cfg["ssl.mass_fraction"])
        keys = cluster_keypoints(pts, n_crops, rng)
        boxes = keypoint_crop_boxes(keys, img.shape[:2], rng)
        gh, gw = att.grid_shape
        h, w = img.shape[:2]
        doc = {
            "source": rec.garment,
            "grid_shape": [gh, gw],
            "per_head_points": [
                [[int(r), int(c)] for (r, c), sh in
                 zip(pts.points, pts.source_head) if sh == head]
                for head in range(att.num_heads)],
            "centroids": [[float(r), float(c)] for r, c in keys.centroids],
            "reduced": keys.reduced,
            "crops": [{"left": b.left, "top": b.top,
                       "width": b.width, "height": b.height} for b in boxes],
        }
        stem = Path(rec.garment).stem
        (out / f"{stem}_keypoints.json").write_text(json.dumps(doc, indent=2))
        points_px = [((c + 0.5) * w / gw, (r + 0.5) * h / gh) for r, c in pts.points]
        centroids_px = [((c + 0.5) * w / gw, (r + 0.5) * h / gh)
                        for r, c in keys.centroids]
        viz.save_keypoint_overlay(img, points_px, centroids_px, boxes,
                                  out / f"{stem}_keypoints.png")
    _write_manifest(out, "extract-keypoints", cfg,
                    {"dataset": _dataset_hash(index),
                     "teacher": _sha256(cfg["ssl.checkpoint"])})
    print(f"keypoints for {len(recs)} garments in {out}")
    return 0


def cmd_visualize_attention(cfg: ExperimentConfig) -> int:
    index = _load_dataset(cfg)
    teacher = _load_teacher(cfg)
    garments, recs = _garment_images(index, "test")
    out = Path(cfg["out_dir"]) / "attention"
    out.mkdir(parents=True, exist_ok=True)
    for rec, img in zip(recs, garments):
        att = extract_class_attention(teacher, img, cfg["ssl.keypoint_layer"])
        stem = Path(rec.garment).stem
        for head in range(att.num_heads):
            viz.save_attention_overlay(img, att.head_grid(head),
                                       out / f"{stem}_head{head}.png",
                                       title=f"head {head}")
        viz.save_attention_overlay(img, att.head_mean(),
                                   out / f"{stem}_headmean.png", title="head mean")
    _write_manifest(out, "visualize-attention", cfg,
                    {"dataset": _dataset_hash(index),
                     "teacher": _sha256(cfg["ssl.checkpoint"])})
    print(f"attention overlays for {len(recs)} garments in {out}")
    return 0


def _build_samples(index, records):
    samples = []
    for rec in records:
        person = synthdata.load_image(index.resolve(rec.person))
        garment = synthdata.load_image(index.resolve(rec.garment))
        mask = synthdata.load_mask(index.resolve(rec.mask))
        if rec.flow:
            flow = synthdata.load_flow(index.resolve(rec.flow))
        else:
            flow = diffusion.fit_affine_flow(garment, mask)
        samples.append(diffusion.assemble_coarse(person, garment, mask, flow))
    return samples


def cmd_train_inpaint(cfg: ExperimentConfig) -> int:
    index = _load_dataset(cfg)
    teacher = _load_teacher(cfg)
    recs = index.split("train") or index.records
    samples = _build_samples(index, recs)
    encode_cond = _condition_fn(teacher)
    cond_tokens = [encode_cond(s.garment) for s in samples]
    sched = cfg.schedule()
    model = diffusion.Denoiser(cfg.denoiser_config())
    out = Path(cfg["out_dir"]) / "train-inpaint"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    log = diffusion.train_inpaint(model, samples, cond_tokens, sched,
                                  cfg.inpaint_train_config(), rng, out_dir=out)
    final = out / "denoiser_final.npz"
    diffusion.save_denoiser(model, final)
    viz.save_loss_curve(log, out / "loss_curve.png", title="inpaint loss")
    _write_manifest(out, "train-inpaint", cfg,
                    {"dataset": _dataset_hash(index),
                     "teacher": _sha256(cfg["ssl.checkpoint"])})
    print(f"final inpaint loss {log[-1]['loss']:.4f}; denoiser at {final}")
    return 0


def cmd_infer(cfg: ExperimentConfig) -> int:
    index = _load_dataset(cfg)
    teacher = _load_teacher(cfg)
    ckpt = cfg["inpaint.checkpoint"]
    if not ckpt:
        raise ConfigurationError("inpaint.checkpoint must point at a trained denoiser")
    model = diffusion.load_denoiser(ckpt)
    recs = (index.split("test") or index.records)[: cfg["infer.count"]]
    samples = _build_samples(index, recs)
    encode_cond = _condition_fn(teacher)
    sched = cfg.schedule()
    out = Path(cfg["out_dir"]) / "infer"
    out.mkdir(parents=True, exist_ok=True)
    for rec, sample in zip(recs, samples):
        cond = encode_cond(sample.garment)
        image, info = diffusion.sample(model, sample, cond, sched,
                                       steps=cfg["infer.steps"],
                                       method=cfg["infer.method"],
                                       rng_seed=cfg["seed"])
        stem = Path(rec.person).stem
        synthdata.save_image(out / f"{stem}_tryon.png", image)
        info["person"] = rec.person
        info["garment"] = rec.garment
        (out / f"{stem}_tryon.json").write_text(json.dumps(info, indent=2))
    _write_manifest(out, "infer", cfg,
                    {"dataset": _dataset_hash(index),
                     "teacher": _sha256(cfg["ssl.checkpoint"]),
                     "denoiser": _sha256(ckpt)})
    print(f"wrote {len(recs)} try-on images to {out}")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    index = _load_dataset(cfg)
    teacher = _load_teacher(cfg)
    gen_dir = Path(cfg["eval.generated_dir"] or Path(cfg["out_dir"]) / "infer")
    if not gen_dir.exists():
        raise DataError(f"generated directory does not exist: {gen_dir}")
    recs = index.split("test") or index.records
    pairs = []
    for rec in recs:
        gen_path = gen_dir / f"{Path(rec.person).stem}_tryon.png"
        if gen_path.exists():
            pairs.append((rec, gen_path))
    if not pairs:
        raise DataError(f"no generated images matching the test split in {gen_dir}")

    window = cfg["eval.ssim_window"]
    sigma = cfg["eval.ssim_sigma"]
    rows = []
    gen_images, real_images = [], []
    for rec, gen_path in pairs:
        person = synthdata.load_image(index.resolve(rec.person))
        generated = synthdata.load_image(gen_path)
        sample = _build_samples(index, [rec])[0]
        rows.append({
            "person": rec.person,
            "generated": gen_path.name,
            "ssim": ssim(generated, person, window=window, sigma=sigma),
            "coarse_ssim": ssim(sample.coarse, person, window=window, sigma=sigma),
        })
        gen_images.append(generated)
        real_images.append(person)

    embed = _class_embed_fn(teacher)
    stats_gen = embed_stats(embed, gen_images)
    stats_real = embed_stats(embed, real_images)
    fed = frechet_embed_distance(stats_gen, stats_real)

    out = Path(cfg["out_dir"]) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    with (out / "per_pair.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["person", "generated", "ssim",
                                                "coarse_ssim"])
        writer.writeheader()
        writer.writerows(rows)
    ssims = [r["ssim"] for r in rows]
    coarse = [r["coarse_ssim"] for r in rows]
    report = {
        "n_pairs": len(rows),
        "ssim_mean": float(np.mean(ssims)),
        "ssim_std": float(np.std(ssims)),
        "coarse_ssim_mean": float(np.mean(coarse)),
        "embed_frechet_distance": fed,
        "embed_rank_deficient": bool(stats_gen.rank_deficient
                                     or stats_real.rank_deficient),
        "encoder_checkpoint_hash": _sha256(cfg["ssl.checkpoint"]),
        "note": "Frechet distance uses this artifact's ViT class-token "
                "embeddings, not Inception features",
    }
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    viz.save_eval_figure(ssims, fed, out / "eval_figure.png",
                         baseline=float(np.mean(coarse)))
    _write_manifest(out, "eval", cfg,
                    {"dataset": _dataset_hash(index),
                     "teacher": _sha256(cfg["ssl.checkpoint"])})
    print(f"eval: mean SSIM {report['ssim_mean']:.4f} "
          f"(coarse {report['coarse_ssim_mean']:.4f}), "
          f"embed Frechet {fed:.4f}; report in {out}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tryonlab",
                                     description="desk-scale virtual try-on lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--crop-mode", choices=("random", "keypoint"), default=None)
        p.add_argument("--steps", type=int, default=None, help="sampler steps")
        p.add_argument("--method", choices=("ddim", "plms"), default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-ssl": cmd_train_ssl,
    "extract-keypoints": cmd_extract_keypoints,
    "visualize-attention": cmd_visualize_attention,
    "train-inpaint": cmd_train_inpaint,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        if args.out is not None:
            cfg.set("out_dir", args.out)
        if args.crop_mode is not None:
            cfg.set("crop_mode", args.crop_mode)
        if args.steps is not None:
            cfg.set("infer.steps", args.steps)
        if args.method is not None:
            cfg.set("infer.method", args.method)
        for item in args.set:
            if "=" not in item:
                raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
            key, _, raw = item.partition("=")
            cfg.set(key.strip(), parse_override(key.strip(), raw.strip()))
        return _HANDLERS[args.command](cfg)
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
