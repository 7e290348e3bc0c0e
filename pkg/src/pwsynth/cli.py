"""Command-line entry point (``pwsynth <command> ...``).

Exit codes: 0 success, 2 validation / configuration / decode failure,
3 numeric failure.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import config as run_config
from . import data_io
from .coordnet import (CoordNet, complete_coords, coordnet_train_step, load_coordnet, make_coord_batch,
                       make_optimizer, save_coordnet)
from .errors import NumericError, ValidationError
from .losses import FaceLossConfig, PerceptualConfig
from .metrics import psnr, ssim
from .posegen import (NOISE_MODES, Discriminator, Generator, GeneratorInputs, generate, generator_inputs,
                      load_generator, save_generator)
from .trainer import Trainer, evaluate, make_examples, set_determinism, to_unit, write_metrics
from .transfer import Source, TransferSpec, tryon
from .uvgeom import (DENSEPOSE_PART_LABELS, bilinear_sample, coordinate_inputs, load_atlas, load_iuv,
                     segment_uv)

log = logging.getLogger("pwsynth")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


def _atlas(path):
    return data_io.fixture_atlas() if path is None else load_atlas(path)


def _records(manifest, split=None):
    if not manifest:
        raise ValidationError("no pair manifest given (data.manifest or --manifest)")
    recs = data_io.read_manifest(manifest)
    if split:
        recs = [r for r in recs if r.split == split]
    if not recs:
        raise ValidationError(f"{manifest}: no pairs with split {split!r}")
    return recs


def _noise_rng(args):
    return torch.Generator().manual_seed(args.seed) if args.noise == "random" else None


def _load_cfg(args):
    cfg = run_config.load_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        cfg.set(key, value)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


def _part_labels(atlas, path):
    if path:
        with open(path) as f:
            return {int(k): int(v) for k, v in json.load(f).items()}
    if atlas.part_count == len(data_io.FIXTURE_PART_LABELS):
        return data_io.FIXTURE_PART_LABELS
    if atlas.part_count == len(DENSEPOSE_PART_LABELS):
        return DENSEPOSE_PART_LABELS
    raise ValidationError("no default garment segmentation for this atlas; pass --part-labels")


def _source_arg(text):
    img, sep, iuv = text.partition(",")
    if not sep:
        raise ValidationError(f"expected <image>,<iuv>, got {text!r}")
    return Source(data_io.load_image(img), load_iuv(iuv))


# -- commands --------------------------------------------------------------------

def cmd_make_fixtures(args):
    path = data_io.write_fixture_dataset(args.out, args.count, seed=args.seed or 0,
                                         difficulty=args.difficulty, test_fraction=args.test_fraction)
    print(path)


def cmd_train_coordnet(args):
    cfg = _load_cfg(args)
    set_determinism(cfg.seed)
    atlas = _atlas(args.atlas or cfg.atlas.get("path"))
    ncfg = cfg.coordnet_config(atlas.uv_resolution)
    section = cfg.coord_train_section()
    steps = args.steps or section.steps
    samples = [data_io.load_pair(r) for r in _records(args.manifest or cfg.data.get("manifest"), "train")]
    model = CoordNet(ncfg)
    opt = make_optimizer(model, ncfg)
    batches = [make_coord_batch(samples[k:k + section.batch_size], atlas, section.use_symmetry)
               for k in range(0, len(samples), section.batch_size)]
    for step in range(steps):
        losses = coordnet_train_step(model, batches[step % len(batches)], opt, atlas)
        if step % 50 == 0 or step == steps - 1:
            log.info("coordnet step %d: L_coord %.5f L_rgb %.5f", step, losses.coord, losses.rgb)
    save_coordnet(args.out, model, extra={"steps": steps, "final_losses": losses._asdict()})
    print(args.out)


def cmd_train_generator(args):
    cfg = _load_cfg(args)
    set_determinism(cfg.seed)
    atlas = _atlas(args.atlas or cfg.atlas.get("path"))
    gcfg = cfg.generator_config()
    tcfg = cfg.train_config()
    if args.steps is not None:
        tcfg.max_steps = args.steps
        tcfg.epochs = max(tcfg.epochs, args.steps)
    lsec = cfg.loss_section()
    coordnet = load_coordnet(args.coordnet) if args.coordnet else None
    manifest = args.manifest or cfg.data.get("manifest")
    samples = [data_io.load_pair(r, (gcfg.output_resolution,) * 2) for r in _records(manifest, "train")]
    examples = make_examples(samples, atlas, gcfg, coordnet)
    G, D = Generator(gcfg), Discriminator(gcfg)
    trainer = Trainer(G, D, tcfg,
                      PerceptualConfig(lsec.layer_ids, lsec.layer_weights, lsec.perceptual_backend),
                      FaceLossConfig(epsilon=lsec.face_epsilon, enabled=lsec.face_enabled and tcfg.use_face),
                      log_dir=args.out_dir)
    if args.resume:
        trainer.load(args.resume)
    trainer.train_phase(examples, eval_examples=examples, checkpoint_dir=os.path.join(args.out_dir, "checkpoints"))
    out = os.path.join(args.out_dir, "generator.pt")
    save_generator(out, G, D, extra={"steps": trainer.state.step})
    print(out)


def _generate_one(G, coordnet, atlas, I_src, iuv_src, iuv_trg, noise, rng):
    inp = generator_inputs(I_src, iuv_src, iuv_trg, atlas, G.cfg, coordnet=coordnet)
    G.eval()
    with torch.no_grad():
        return generate(G, GeneratorInputs.stack([inp]), noise, rng)[0]


def cmd_repose(args):
    torch.manual_seed(args.seed or 0)
    G, _ = load_generator(args.gen)
    coordnet = load_coordnet(args.coordnet) if args.coordnet else None
    atlas = _atlas(args.atlas)
    out = _generate_one(G, coordnet, atlas, data_io.load_image(args.src), load_iuv(args.src_iuv),
                        load_iuv(args.trg_iuv), args.noise, _noise_rng(args))
    data_io.save_image(to_unit(out) * 2 - 1, args.out)
    print(args.out)


def cmd_tryon(args):
    torch.manual_seed(args.seed or 0)
    G, _ = load_generator(args.gen)
    coordnet = load_coordnet(args.coordnet) if args.coordnet else None
    atlas = _atlas(args.atlas)
    seg = segment_uv(atlas, _part_labels(atlas, args.part_labels))
    garments = []
    for g in args.garment:
        label, sep, rest = g.partition("=")
        if not sep:
            raise ValidationError(f"--garment expects <label>=<image>,<iuv>, got {g!r}")
        garments.append((_source_arg(rest), [label]))
    spec = TransferSpec(_source_arg(args.person), garments, load_iuv(args.trg_iuv), seg)
    out = tryon(spec, G, atlas, coordnet, args.noise, _noise_rng(args))[0]
    data_io.save_image(to_unit(out) * 2 - 1, args.out)
    print(args.out)


def cmd_eval(args):
    records = _records(args.manifest, args.split)
    if args.gen:
        G, _ = load_generator(args.gen)
        coordnet = load_coordnet(args.coordnet) if args.coordnet else None
        atlas = _atlas(args.atlas)
        res = (G.cfg.output_resolution,) * 2
        examples = make_examples([data_io.load_pair(r, res) for r in records], atlas, G.cfg, coordnet)
        result = evaluate(G, examples)
    else:
        # no generator: score the source image itself against the target
        rows = []
        for i, r in enumerate(records):
            s = data_io.load_pair(r)
            a, b = (s.I_src + 1) / 2, (s.I_trg + 1) / 2
            rows.append({"pair": i, "psnr": psnr(a, b, s.M_trg), "ssim": ssim(a, b, s.M_trg)})
        summary = {k: float(np.mean([row[k] for row in rows])) for k in ("psnr", "ssim")}
        summary.update(fid="unavailable", lpips="unavailable")
        result = {"rows": rows, "summary": summary}
    write_metrics(result, args.csv, args.jsonl)
    print(json.dumps(result["summary"]))


def cmd_inspect_uv(args):
    """Side-by-side UV panels: base, base plus mirrored, and completed."""
    atlas = _atlas(args.atlas)
    image, iuv = data_io.load_image(args.src), load_iuv(args.src_iuv)
    ci = coordinate_inputs(iuv, atlas)
    fields = [ci.base, ci.combined]
    if args.coordnet:
        fields.append(complete_coords(ci.combined, ci.combined_mask, load_coordnet(args.coordnet)))
    panels = [bilinear_sample(image, f) for f in fields]
    gap = np.ones((atlas.uv_resolution[0], 2, 3))
    row = np.concatenate(sum(([p, gap] for p in panels), [])[:-1], axis=1)
    data_io.save_image(row, args.out)
    print(args.out)


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="pwsynth", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="seed for every random stream")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random stream")
        return sp

    def config_args(sp):
        sp.add_argument("--config", help="JSON run config; keys: " + ", ".join(run_config.schema()))
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key, e.g. generator.modulation_mode=nonspatial")
        sp.add_argument("--atlas", help="atlas file (default: the fixture atlas)")
        sp.add_argument("--manifest", help="pair manifest (overrides data.manifest)")
        sp.add_argument("--steps", type=int, help="stop after this many steps")

    def gen_args(sp):
        sp.add_argument("--gen", required=True, help="generator checkpoint")
        sp.add_argument("--coordnet", help="coordnet checkpoint (default: symmetry-combined coordinates only)")
        sp.add_argument("--atlas", help="atlas file (default: the fixture atlas)")
        sp.add_argument("--noise", choices=NOISE_MODES, default="zero")

    sp = add("make-fixtures", cmd_make_fixtures, "write a synthetic fixture dataset and manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--difficulty", type=float, default=0.5, help="occluded fraction of the left arm")
    sp.add_argument("--test-fraction", type=float, default=0.25)

    sp = add("train-coordnet", cmd_train_coordnet, "train the coordinate completion network")
    config_args(sp)
    sp.add_argument("--out", required=True, help="output checkpoint")

    sp = add("train-generator", cmd_train_generator, "train the pose generator")
    config_args(sp)
    sp.add_argument("--coordnet", help="frozen coordnet checkpoint")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--resume", help="trainer checkpoint to resume from")

    sp = add("repose", cmd_repose, "render a source person in a target pose")
    gen_args(sp)
    sp.add_argument("--src", required=True)
    sp.add_argument("--src-iuv", required=True)
    sp.add_argument("--trg-iuv", required=True)
    sp.add_argument("--out", required=True)

    sp = add("tryon", cmd_tryon, "garment transfer from one or more sources")
    gen_args(sp)
    sp.add_argument("--person", required=True, metavar="IMG,IUV")
    sp.add_argument("--garment", action="append", default=[], metavar="LABEL=IMG,IUV")
    sp.add_argument("--trg-iuv", required=True)
    sp.add_argument("--part-labels", help="JSON {part: garment label} (default per atlas)")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "foreground PSNR / SSIM over a manifest split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--gen", help="generator checkpoint; without it the source image is scored")
    sp.add_argument("--coordnet")
    sp.add_argument("--atlas")
    sp.add_argument("--csv")
    sp.add_argument("--jsonl")

    sp = add("inspect-uv", cmd_inspect_uv, "render UV-space panels of the source coordinates")
    sp.add_argument("--atlas")
    sp.add_argument("--src", required=True)
    sp.add_argument("--src-iuv", required=True)
    sp.add_argument("--coordnet")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
