"""Command-line entry point: ``semvpr {fixture,train,extract,eval,attn-dump}``.

Precedence for every setting: command-line flag, then ``--config`` file, then
built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import Config, load_config, save_config
from .data import generate_fixture, load_manifest, write_pgm
from .formats import load_descriptors, save_descriptors
from .model import VPRModel
from .retrieval import DescriptorIndex, format_table, recall_at_n, to_csv
from .train import fit

log = logging.getLogger("semvpr")

_ABLATION_FLAGS = ("ms_gem", "att", "semseg", "g_semseg", "da")


class UsageError(Exception):
    pass


def _config(args) -> Config:
    if args.config is None:
        cfg = Config()
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(args, cfg: Config) -> VPRModel:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if args.config is None and (ckpt.parent / "config.toml").is_file():
        cfg = load_config(ckpt.parent / "config.toml")
    model = VPRModel(cfg.model_config(), np.random.default_rng(0))
    model.load(ckpt)
    return model


def _split(args):
    manifest = load_manifest(args.manifest)
    return manifest.select(role=args.role) if args.role else manifest


def cmd_fixture(args) -> int:
    out = _out_dir(args)
    seed = 7 if args.seed is None else args.seed
    m = generate_fixture(out, seed, places=args.places, views=args.views, shape=tuple(args.shape),
                         domain_shift=args.sigma)
    print(f"wrote {len(m)} records to {out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    flags = dataclasses.asdict(cfg.ablation)
    flags.update({name: False for name in _ABLATION_FLAGS if getattr(args, f"no_{name}")})
    # guidance needs both the attention map and the decoder
    flags["g_semseg"] = flags["g_semseg"] and flags["semseg"] and flags["att"]
    cfg.ablation = type(cfg.ablation)(**flags)
    if args.steps is not None:
        cfg.train.steps = args.steps
    source = load_manifest(args.manifest)
    target = load_manifest(args.target_manifest) if args.target_manifest else source
    save_config(out / "config.toml", cfg)
    with open(out / "triplets.csv", "w") as tl:
        res = fit(cfg, source, target if cfg.ablation.da else None, out_dir=out, triplet_log=tl)
    r1 = res.validation.get(1)
    print(f"trained {cfg.train.steps} steps; checkpoint {out / 'checkpoint.vprc'}"
          + (f"; source R@1 {r1:.3f}" if r1 is not None else ""))
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    model = _model(args, cfg)
    split = _split(args)
    if len(split) == 0:
        raise UsageError("the selected manifest split is empty")
    vecs = model.describe(np.stack([split.load_image(r) for r in split.records]))
    name = args.name or f"{args.role or 'all'}.vprd"
    save_descriptors(out / name, split.ids, vecs)
    print(f"wrote {len(split)} descriptors of dimension {vecs.shape[1]} to {out / name}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    coords = {r.id: r.coord for r in manifest.records}
    g_ids, g_vecs = load_descriptors(args.gallery)
    q_ids, q_vecs = load_descriptors(args.queries)
    for rid in np.concatenate([g_ids, q_ids]):
        if int(rid) not in coords:
            raise UsageError(f"descriptor id {int(rid)} is not in the manifest")
    g_xy = np.array([coords[int(i)] for i in g_ids])
    q_xy = np.array([coords[int(i)] for i in q_ids])
    res = recall_at_n(DescriptorIndex(g_ids, g_vecs), q_ids, q_vecs, q_xy, g_xy, args.radius,
                      convention=manifest.convention)
    print(format_table(res, args.label))
    if args.out is not None:
        out = _out_dir(args)
        (out / "recall.csv").write_text(to_csv(res))
    return 0


def cmd_attn_dump(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    model = _model(args, cfg)
    split = _split(args)
    maps = model.attention_maps(np.stack([split.load_image(r) for r in split.records]))
    for rid, m in zip(split.ids, maps):
        lo, hi = float(m.min()), float(m.max())
        scaled = np.zeros(m.shape) if hi == lo else (m - lo) / (hi - lo)
        write_pgm(out / f"attn_{int(rid):06d}.pgm", np.rint(scaled * 255).astype(np.uint8))
    print(f"wrote {len(maps)} attention maps to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semvpr", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate the synthetic geotagged fixture")
    p.add_argument("--places", type=int, default=32)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--shape", type=int, nargs=3, default=(3, 64, 64), metavar=("C", "H", "W"))
    p.add_argument("--sigma", type=float, default=0.3, help="target-domain shift magnitude")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("train", help="train a model and write checkpoint.vprc and metrics.csv")
    p.add_argument("--manifest", required=True, help="manifest with labelled source training records")
    p.add_argument("--target-manifest", help="manifest with target-domain images (default: --manifest)")
    p.add_argument("--steps", type=int)
    for name in _ABLATION_FLAGS:
        p.add_argument(f"--no-{name.replace('_', '-')}", dest=f"no_{name}", action="store_true",
                       help=f"disable {name}")
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("extract", cmd_extract, "write descriptors for a manifest split (VPRD)"),
                            ("attn-dump", cmd_attn_dump, "write attention maps as 8-bit PGM files")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--role", choices=("train", "gallery", "query"))
        if name == "extract":
            p.add_argument("--name", help="output file name (default <role>.vprd)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="Recall@1/5/10 of query descriptors against a gallery")
    p.add_argument("--gallery", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--manifest", required=True, help="manifest holding the coordinates of both sets")
    p.add_argument("--radius", type=float, default=25.0, help="positive radius in meters")
    p.add_argument("--label", default="model")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"semvpr: error: {exc}\n")
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"semvpr: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
