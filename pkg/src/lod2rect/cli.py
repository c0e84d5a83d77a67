"""Command line: reconstruct, fuse-masks, evaluate, synth.

Exit codes: 0 success, 2 input or configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .geodata import RasterFormatError, load_config, read_raster, require_aligned, write_raster

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_STAGE = 3

log = logging.getLogger("lod2rect")

# refinement presets: no refinement, OSM only, GC only, OSM followed by GC
ABLATIONS = {
    "none": {"gc_orientation": False, "osm": False, "gc_type": False},
    "osm": {"gc_orientation": False, "osm": True, "gc_type": False},
    "gc": {"gc_orientation": True, "osm": False, "gc_type": True},
    "osm+gc": {"gc_orientation": True, "osm": True, "gc_type": True},
}


class InputError(Exception):
    pass


def _ascii(path: str) -> str:
    if not path.isascii():
        raise InputError(f"path must be ASCII: {path!r}")
    return path


def _read(path, kind):
    if path is None:
        return None
    try:
        return read_raster(_ascii(path), kind)
    except FileNotFoundError as exc:
        raise InputError(f"{kind} raster not found: {path}") from exc
    except (OSError, RasterFormatError, ValueError) as exc:
        raise InputError(f"cannot read {kind} raster {path}: {exc}") from exc


def _stage_list(text):
    from .pipeline import STAGES

    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STAGES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown stage(s) {bad}; choose from {', '.join(STAGES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    from .pipeline import STAGES

    p = argparse.ArgumentParser(prog="lod2rect", description="LoD-2 building reconstruction from a DSM and orthophoto.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="run the full pipeline and write OBJ, catalog and intermediates")
    r.add_argument("--dsm", required=True)
    r.add_argument("--ortho")
    r.add_argument("--mask", help="binary building mask (PGM or ASCII grid)")
    r.add_argument("--three-class", help="0 background, 1 building, 2 separation line")
    r.add_argument("--detections", help="secondary instance map used by mask fusion")
    r.add_argument("--roads", help="road polylines as JSON")
    r.add_argument("--config", help="JSON file with parameter overrides")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--ablation", choices=sorted(ABLATIONS), help="orientation/type refinement preset")
    r.add_argument("--enable", type=_stage_list, default=[], help=f"comma list of stages to switch on ({', '.join(STAGES)})")
    r.add_argument("--disable", type=_stage_list, default=[], help="comma list of stages to switch off")
    r.add_argument("--workers", type=int, default=1, help="worker processes for per-building stages")
    r.add_argument("--no-intermediate", action="store_true", help="write only the OBJ and the catalog")

    f = sub.add_parser("fuse-masks", help="fuse a semantic mask with a secondary instance map")
    f.add_argument("--mask", required=True)
    f.add_argument("--detections", required=True)
    f.add_argument("--config")
    f.add_argument("--out", required=True, help="fused mask path (.pgm or .asc)")

    e = sub.add_parser("evaluate", help="IOU2/IOU3 of a catalog against reference rasters")
    e.add_argument("--catalog", required=True)
    e.add_argument("--ref-mask", required=True)
    e.add_argument("--ref-height", required=True)
    e.add_argument("--ref-instances", help="reference instance map for per-building scores")
    e.add_argument("--tol", type=float, default=2.0, help="vertical tolerance in metres")
    e.add_argument("--out", required=True, help="report prefix; writes <prefix>.json and <prefix>.csv")

    s = sub.add_parser("synth", help="render a synthetic scene from a JSON description")
    s.add_argument("description", nargs="?", help="scene description JSON")
    s.add_argument("--random", action="store_true", help="use the random street-block scene instead")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="DSM noise sigma for --random")
    s.add_argument("--out", required=True)
    return p


def _stages(args) -> dict:
    from .pipeline import DEFAULT_STAGES

    st = dict(DEFAULT_STAGES)
    if args.ablation:
        st.update(ABLATIONS[args.ablation])
    for s in args.enable:
        st[s] = True
    for s in args.disable:
        st[s] = False
    return st


def cmd_reconstruct(args) -> int:
    from .labeling import load_roads
    from .pipeline import PipelineSpec, file_sha256, reconstruct

    try:
        cfg = load_config(_ascii(args.config) if args.config else None)
    except (OSError, ValueError) as exc:
        raise InputError(f"config: {exc}") from exc
    roads = None
    if args.roads:
        try:
            roads = load_roads(_ascii(args.roads))
        except (OSError, ValueError) as exc:
            raise InputError(f"{args.roads}: {exc}") from exc
    paths = {"dsm": args.dsm, "ortho": args.ortho, "mask": args.mask, "three_class": args.three_class,
             "detections": args.detections, "roads": args.roads}
    spec = PipelineSpec(
        dsm=_read(args.dsm, "dsm"),
        ortho=_read(args.ortho, "ortho"),
        mask=_read(args.mask, "mask"),
        three_class=_read(args.three_class, "labels"),
        detections=_read(args.detections, "instances"),
        roads=roads,
        stages=_stages(args),
        config=cfg,
        out_dir=_ascii(args.out),
        intermediate=not args.no_intermediate,
        workers=args.workers,
        input_hashes={k: file_sha256(v) for k, v in paths.items() if v},
    )
    scene = reconstruct(spec)
    log.info("reconstructed %d buildings into %s", len(scene), args.out)
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .segmentation import _instance_map, fuse_segmentations

    try:
        cfg = load_config(_ascii(args.config) if args.config else None)
    except (OSError, ValueError) as exc:
        raise InputError(f"config: {exc}") from exc
    mask = _read(args.mask, "mask")
    det = _read(args.detections, "instances")
    try:
        require_aligned(mask, det)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    fused = fuse_segmentations(mask, _instance_map(np.asarray(det.values), det), cfg)
    write_raster(fused, _ascii(args.out))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .scene import load_catalog

    try:
        scene = load_catalog(_ascii(args.catalog))
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{args.catalog}: {exc}") from exc
    ref_mask = _read(args.ref_mask, "mask")
    ref_height = _read(args.ref_height, "dsm")
    ref_inst = _read(args.ref_instances, "instances")
    if not args.tol >= 0:
        raise InputError("tolerance must be non-negative")
    try:
        report = evaluate(scene, ref_mask, ref_height, args.tol, ref_inst)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    prefix = _ascii(args.out)
    d = os.path.dirname(prefix)
    if d:
        os.makedirs(d, exist_ok=True)
    report.write_json(prefix + ".json")
    report.write_csv(prefix + ".csv")
    print(f"IOU2 {report.iou2:.4f}  IOU3 {report.iou3:.4f}  RMSE {report.rmse_m:.3f} m")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SceneOverlapError, random_description, synth

    if args.random:
        desc = random_description(seed=args.seed, noise_sigma=args.noise)
    elif args.description:
        try:
            with open(_ascii(args.description), encoding="ascii") as fh:
                desc = json.load(fh)
        except (OSError, ValueError) as exc:
            raise InputError(f"{args.description}: {exc}") from exc
    else:
        raise InputError("give a description file or --random")
    try:
        synth(desc, _ascii(args.out))
    except (SceneOverlapError, KeyError, ValueError) as exc:
        raise InputError(f"scene description: {exc}") from exc
    return EXIT_OK


COMMANDS = {"reconstruct": cmd_reconstruct, "fuse-masks": cmd_fuse, "evaluate": cmd_evaluate, "synth": cmd_synth}


def main(argv=None) -> int:
    from .pipeline import ConfigError, StageError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors, 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, ConfigError) as exc:
        print(f"lod2rect: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as exc:
        print(f"lod2rect: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
