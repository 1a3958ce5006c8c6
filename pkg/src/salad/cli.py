"""Command-line entry point: ``salad <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import ConfigurationError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run configuration file")
    p.add_argument("--preset", choices=["toy"], help="start from a named preset before applying --config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--workdir", help="artifact directory (default: $SALAD_WORKDIR)")
    p.add_argument("--data-root", help="dataset root in LOCO or flat layout")
    p.add_argument("--category", help="category directory under the data root")
    p.add_argument("--force", action="store_true", help="rerun even when the stage is up to date")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="write the procedural toy dataset")
    p.add_argument("--spec", help="ToySpec JSON (defaults used for missing keys)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-maps", help="pseudo-label, train the segmenter and write composition maps")
    _common(p)
    p.add_argument("--backend", help="feature backend id (stub, dino, torchscript)")
    p.add_argument("--mask-backend", help="mask backend id (stub, sam-hq)")
    p.add_argument("--k", type=int, help="number of part classes K")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one branch")
    _common(p)
    p.add_argument("--branch", required=True, choices=["appearance", "composition", "global"])

    p = sub.add_parser("calibrate", help="validation statistics for score fusion")
    _common(p)

    p = sub.add_parser("eval", help="score the test split and write the report")
    _common(p)
    p.add_argument("--report", help="report JSON path; CSV and figures are written next to it")

    p = sub.add_parser("run", help="run the configured stage sequence")
    _common(p)
    p.add_argument("--report")

    p = sub.add_parser("infer", help="maps and fused score for one image")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="draw one synthetic anomaly on a composition map")
    p.add_argument("--in", dest="input", required=True, help="composition map PNG (with meta.json)")
    p.add_argument("--kind", default="random",
                   choices=["random", "perlin_paste", "component_inpaint", "component_removal"])
    p.add_argument("--source", help="second map used as inpainting source")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-area", type=int, default=50)
    p.add_argument("--out", required=True)
    return parser


def _pipeline(args):
    from .pipeline import Pipeline, load_run_config, parse_overrides

    overrides = parse_overrides(args.set)
    for attr, key in (("workdir", "workdir"), ("data_root", "data_root"), ("category", "category"),
                      ("backend", "feature_backend"), ("mask_backend", "mask_backend"), ("k", "K"), ("seed", "seed")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return Pipeline(load_run_config(args.config, overrides, args.preset))


def _print_report(rep) -> None:
    line = f"{rep.stage}: {rep.status}"
    if rep.status == "ran":
        line += f" ({rep.wall_time:.1f}s)"
    print(line)


def _cmd_gen_toy(args) -> None:
    from .toy import ToySpec, generate_toy_dataset

    spec = ToySpec.from_json(json.loads(Path(args.spec).read_text())) if args.spec else ToySpec()
    if args.seed is not None:
        spec = ToySpec.from_json({**spec.to_json(), "seed": args.seed})
    index = generate_toy_dataset(spec, args.out)
    cat = index[spec.category]
    print(json.dumps({"root": str(cat.root), **{k: len(v) for k, v in cat.samples.items()}}))


def _cmd_simulate(args) -> None:
    import numpy as np
    from PIL import Image

    from .data import load_composition_map, save_composition_map
    from .simulator import sample_training_example, simulate_inpaint, simulate_removal, simulate_structural

    c = load_composition_map(args.input)
    source = load_composition_map(args.source) if args.source else None
    if args.kind == "perlin_paste":
        s = simulate_structural(c, args.seed)
    elif args.kind == "component_removal":
        s = simulate_removal(c, args.seed, args.min_area)
    elif args.kind == "component_inpaint":
        if source is None:
            raise ConfigurationError("component_inpaint needs --source")
        s = simulate_inpaint(c, source, args.seed, args.min_area)
    else:
        corpus = [c] + ([source] if source is not None else [])
        s = sample_training_example(c, corpus, args.seed, exclude=0, min_area=args.min_area)
    out = Path(args.out)
    save_composition_map(s.augmented, out / "augmented.png", args.seed)
    Image.fromarray(s.gt_mask.astype(np.uint8) * 255, mode="L").save(out / "gt_mask.png")
    (out / "sample.json").write_text(json.dumps({"kind": s.kind, "seed": args.seed, "gt_area": int(s.gt_mask.sum())}))
    print(f"{s.kind}: gt area {int(s.gt_mask.sum())}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-toy":
            _cmd_gen_toy(args)
        elif args.command == "simulate":
            _cmd_simulate(args)
        elif args.command == "infer":
            result = _pipeline(args).infer(args.image, args.out)
            print(json.dumps(result, indent=2))
        else:
            pipe = _pipeline(args)
            if args.command == "run":
                for stage in pipe.config.stage_list:
                    kw = {"report": args.report} if stage == "eval" and args.report else {}
                    _print_report(pipe.run_stage(stage, force=args.force, **kw))
            else:
                stage = {"gen-maps": "gen-maps", "calibrate": "calibrate", "eval": "eval"}.get(args.command)
                if args.command == "train":
                    stage = f"train-{args.branch}"
                kw = {"report": args.report} if args.command == "eval" and args.report else {}
                rep = pipe.run_stage(stage, force=args.force, **kw)
                _print_report(rep)
                if stage == "eval":
                    print(json.dumps(rep.details.get("auroc", {}), indent=2))
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
