"""Command-line surface: generate -> cluster -> train -> evaluate pipelines.

Exit codes: 0 ok, 2 parse error, 3 invariant violation, 4 degenerate
training (no labeled batches).  The environment variable SIGNMAP_CONFIG
overrides the --config path (and nothing else).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__, fileio
from .calibrate import TrainConfig, train
from .cluster import EmConfig, run_em
from .domain import InvariantError, Rect, SensorParams, make_ray
from .evaluate import default_thresholds, pr_curve
from .fileio import ParseError
from .priors import PriorDensity
from .synth import SynthConfig, generate

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_INVARIANT = 3
EXIT_DEGENERATE = 4

EARTH_RADIUS_M = 6371000.0


class DegenerateTrainingError(RuntimeError):
    pass


def _config_path(args) -> str:
    return os.environ.get("SIGNMAP_CONFIG") or args.config


def _build_prior(args, raw_config, region_area: float) -> PriorDensity:
    section = (raw_config or {}).get("prior", {})
    kind = args.prior.replace("-", "_") if args.prior else \
        section.get("kind", "uniform")
    if kind == "uniform":
        return PriorDensity(kind="uniform", region_area=region_area)
    road = args.road_network or section.get("road_network")
    if not road:
        raise ParseError("spike-slab prior needs --road-network")
    pts = fileio.read_road_network(road)
    return PriorDensity(
        kind="spike_slab",
        region_area=region_area,
        intersections=pts,
        intersection_radius=float(section.get("intersection_radius", 15.0)),
        affinity={int(c): float(w)
                  for c, w in section.get("affinity", {}).items()},
        default_affinity=float(section.get("default_affinity", 0.5)),
    )


def cmd_cluster(args) -> int:
    t0 = time.perf_counter()
    cfg = fileio.load_config(_config_path(args))
    em: EmConfig = cfg["em"]
    if args.seed is not None:
        em = EmConfig(**{**asdict(em), "seed": args.seed})
    if args.prediction_mode:
        em = em.prediction_mode()
    params = cfg["params"]
    if args.params:
        params, _, _ = fileio.load_checkpoint(args.params)

    rays = fileio.read_rays(args.rays)
    truth = fileio.read_truth(args.truth) if args.truth else None
    batch = fileio.batch_from_rays(rays, truth)
    region_area = max(batch.bounding_box.area, 1.0)
    prior = _build_prior(args, cfg["raw"], region_area)

    hypotheses = []
    for class_id in batch.class_ids():
        if class_id not in params:
            print(f"warning: no parameters for class {class_id}, skipped",
                  file=sys.stderr)
            continue
        sub = batch.filter_class(class_id)
        result = run_em(sub, params[class_id], prior, em)
        kept = [h for h in result.hypotheses if h.existence >= args.threshold]
        hypotheses.extend(kept)

    os.makedirs(args.out, exist_ok=True)
    hyp_path = os.path.join(args.out, "hypotheses.jsonl")
    geo_path = os.path.join(args.out, "overlay.geojson")
    fileio.write_hypotheses(hyp_path, hypotheses)
    fileio.write_geojson(geo_path, hypotheses, truth)
    fileio.write_manifest(
        os.path.join(args.out, "manifest.json"),
        command="cluster",
        config={**fileio.config_snapshot(em, cfg["train"], params),
                "argv": args.argv, "threshold": args.threshold},
        seed=em.seed,
        inputs={"rays": args.rays, **({"truth": args.truth} if args.truth else {})},
        outputs={"hypotheses": hyp_path, "overlay": geo_path},
        wall_clock_s=time.perf_counter() - t0,
    )
    print(f"wrote {len(hypotheses)} hypotheses to {hyp_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = fileio.load_config(_config_path(args))
    em: EmConfig = cfg["em"]
    tc: TrainConfig = cfg["train"]
    if args.seed is not None:
        tc = TrainConfig(**{**asdict(tc), "seed": args.seed})

    ray_files = sorted(
        f for f in os.listdir(args.rays_dir) if f.endswith(".jsonl"))
    if not ray_files:
        raise ParseError(f"no .jsonl ray files in {args.rays_dir}")
    batches = []
    n_truth = 0
    for name in ray_files:
        rays = fileio.read_rays(os.path.join(args.rays_dir, name))
        truth = None
        tp = os.path.join(args.truth_dir, name) if args.truth_dir else None
        if tp and os.path.exists(tp):
            truth = fileio.read_truth(tp)
            n_truth += 1
        batches.append(fileio.batch_from_rays(rays, truth))
    if n_truth == 0:
        print("warning: no labeled batches; training degenerates to the "
              "prior", file=sys.stderr)
        return EXIT_DEGENERATE

    region_area = max(b.bounding_box.area for b in batches)
    prior = _build_prior(args, cfg["raw"], region_area)
    trained, trace = train(batches, cfg["params"], prior, em, tc)

    fileio.save_checkpoint(args.out_params, trained, train_config=tc)
    trace_path = os.path.splitext(args.out_params)[0] + "_trace.csv"
    fileio.write_trace_csv(trace_path, trace)
    fileio.write_manifest(
        os.path.splitext(args.out_params)[0] + "_manifest.json",
        command="train",
        config={**fileio.config_snapshot(em, tc, cfg["params"]),
                "argv": args.argv},
        seed=tc.seed,
        inputs={"rays_dir": args.rays_dir,
                **({"truth_dir": args.truth_dir} if args.truth_dir else {})},
        outputs={"checkpoint": args.out_params, "trace": trace_path},
        wall_clock_s=time.perf_counter() - t0,
    )
    print(f"trained {len(trained)} classes over {len(batches)} batches "
          f"({n_truth} labeled); wrote {args.out_params}")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    preds = fileio.read_hypotheses(args.pred)
    truth = fileio.read_truth(args.truth)

    pred_classes = sorted({h.class_id for h in preds})
    truth_classes = sorted({c for _, c in truth})
    skipped = sorted(set(pred_classes) ^ set(truth_classes))
    if skipped:
        print(f"warning: class mismatch between files, skipping classes "
              f"{skipped}", file=sys.stderr)
    rows = []
    for c in sorted(set(pred_classes) & set(truth_classes)):
        p = [(h.position, h.existence) for h in preds if h.class_id == c]
        t = [pos for pos, cc in truth if cc == c]
        ths = [float(x) for x in args.thresholds.split(",")] \
            if args.thresholds else default_thresholds(p)
        if not ths:
            ths = [args.threshold]
        curve = pr_curve(p, t, args.radius, ths,
                         default_threshold=args.threshold)
        for th, prec, rec in curve.points:
            rows.append((c, th, prec, rec, curve.auc))
    fileio.write_metrics_csv(args.out, rows)
    fileio.write_manifest(
        os.path.splitext(args.out)[0] + "_manifest.json",
        command="eval",
        config={"radius": args.radius, "threshold": args.threshold,
                "thresholds": args.thresholds, "argv": args.argv},
        seed=None,
        inputs={"pred": args.pred, "truth": args.truth},
        outputs={"metrics": args.out},
        wall_clock_s=time.perf_counter() - t0,
    )
    print(f"wrote metrics for {len(rows)} (class, threshold) rows to "
          f"{args.out}")
    return EXIT_OK


def _synth_config_from_file(path, seed_override=None) -> SynthConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON: {e.msg}", path) from e
    try:
        region = Rect(*doc.get("region", [0.0, 0.0, 500.0, 500.0]))
        params = {int(c): SensorParams(**p)
                  for c, p in doc.get("params", {"1": {}}).items()}
        prior = None
        if "road_network" in doc:
            pts = fileio.read_road_network(doc["road_network"])
            prior = PriorDensity(
                kind="spike_slab", region_area=region.area, intersections=pts,
                intersection_radius=doc.get("intersection_radius", 15.0),
                default_affinity=doc.get("affinity", 0.9))
        return SynthConfig(
            region=region,
            n_objects={int(c): int(n)
                       for c, n in doc.get("n_objects", {"1": 20}).items()},
            density=doc.get("density"),
            n_frames=int(doc.get("n_frames", 100)),
            frame_placement=doc.get("frame_placement", "grid"),
            params=params,
            clutter_rate=float(doc.get("clutter_rate", 0.0)),
            seed=int(seed_override if seed_override is not None
                     else doc.get("seed", 0)),
            placement_prior=prior,
        )
    except (TypeError, ValueError, KeyError) as e:
        raise ParseError(f"bad synth config: {e}", path) from e


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    config = _synth_config_from_file(_config_path(args), args.seed)
    batch, provenance = generate(config)
    os.makedirs(args.out_dir, exist_ok=True)
    rays_path = os.path.join(args.out_dir, "rays.jsonl")
    truth_path = os.path.join(args.out_dir, "truth.jsonl")
    prov_path = os.path.join(args.out_dir, "provenance.json")
    fileio.write_rays(rays_path, batch.rays)
    fileio.write_truth(truth_path, batch.ground_truth)
    fileio.atomic_write_text(prov_path, json.dumps(provenance) + "\n")
    fileio.write_manifest(
        os.path.join(args.out_dir, "manifest.json"),
        command="synth",
        config={"synth_config": _config_path(args), "argv": args.argv},
        seed=config.seed,
        inputs={"config": _config_path(args)},
        outputs={"rays": rays_path, "truth": truth_path,
                 "provenance": prov_path},
        wall_clock_s=time.perf_counter() - t0,
    )
    print(f"wrote {len(batch.rays)} rays, {len(batch.ground_truth)} truth "
          f"objects to {args.out_dir}")
    return EXIT_OK


def cmd_convert(args) -> int:
    """Approximate equirectangular lat/lon -> local planar meters."""
    ref_lat = math.radians(args.ref_lat)
    out = []
    for ln, rec in fileio._iter_jsonl(args.input):
        try:
            x = EARTH_RADIUS_M * math.cos(ref_lat) \
                * math.radians(rec["lon"] - args.ref_lon)
            y = EARTH_RADIUS_M * math.radians(rec["lat"] - args.ref_lat)
            out.append(make_ray((x, y), rec["theta"], rec["conf"],
                                rec["class"], rec["frame"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad lat/lon ray record: {e}", args.input,
                             ln) from e
    fileio.write_rays(args.output, out)
    print(f"converted {len(out)} rays to {args.output} "
          f"(equirectangular, approximate)")
    return EXIT_OK


def cmd_rerun(args) -> int:
    with open(args.manifest) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON: {e.msg}", args.manifest) from e
    argv = doc.get("config", {}).get("argv")
    if not argv:
        raise ParseError("manifest does not record argv", args.manifest)
    return main(argv)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="signmap",
        description="Map-object triangulation from bearing-only detections")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--prior", choices=["uniform", "spike-slab"],
                        default=None)
        sp.add_argument("--road-network", default=None)

    sp = sub.add_parser("cluster", help="cluster a ray file into hypotheses")
    sp.add_argument("--rays", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--params", default=None,
                    help="checkpoint overriding the config's parameters")
    sp.add_argument("--truth", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--radius", type=float, default=10.0)
    sp.add_argument("--prediction-mode", action="store_true",
                    help="loosened pruning thresholds")
    common(sp)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("train", help="fit per-class sensor parameters")
    sp.add_argument("--rays-dir", required=True)
    sp.add_argument("--truth-dir", default=None)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-params", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="precision/recall/AUC of predictions")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--radius", type=float, default=10.0)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--thresholds", default=None,
                    help="comma-separated descending sweep")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("convert",
                        help="approximate lat/lon to local planar meters")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--ref-lat", type=float, required=True)
    sp.add_argument("--ref-lon", type=float, required=True)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("rerun", help="re-execute a recorded run manifest")
    sp.add_argument("manifest")
    sp.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except ParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except InvariantError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except DegenerateTrainingError as e:
        print(f"warning: {e}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
