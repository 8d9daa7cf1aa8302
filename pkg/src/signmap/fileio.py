"""File formats: rays, truth, road networks, configs, checkpoints, outputs.

Rays and truth are JSON lines for streaming ingestion; everything else is a
single JSON document.  All writers are atomic (temp file + rename) and all
floats round-trip exactly through json's repr-based encoder.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .calibrate import AdamState, TrainConfig
from .cluster import EmConfig
from .domain import ObjectHypothesis, Ray, Rect, SceneBatch, make_ray

__all__ = [
    "ParseError",
    "read_rays", "write_rays",
    "read_truth", "write_truth",
    "read_road_network", "write_road_network",
    "load_config",
    "read_hypotheses", "write_hypotheses",
    "save_checkpoint", "load_checkpoint",
    "write_geojson", "write_metrics_csv", "write_trace_csv",
    "write_manifest", "atomic_write_text",
]

CHECKPOINT_VERSION = 1


class ParseError(ValueError):
    """Malformed input file; carries path and line number when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")


def atomic_write_text(path, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _iter_jsonl(path):
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                yield ln, json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON: {e.msg}", path, ln) from e


def read_rays(path) -> list[Ray]:
    rays = []
    for ln, rec in _iter_jsonl(path):
        try:
            rays.append(make_ray(
                (rec["x"], rec["y"]), rec["theta"], rec["conf"],
                rec["class"], rec["frame"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad ray record: {e}", path, ln) from e
    return rays


def write_rays(path, rays) -> None:
    buf = io.StringIO()
    for r in rays:
        json.dump({"x": r.origin[0], "y": r.origin[1],
                   "theta": r.bearing_angle, "conf": r.confidence,
                   "class": r.class_id, "frame": r.frame_id}, buf)
        buf.write("\n")
    atomic_write_text(path, buf.getvalue())


def read_truth(path) -> list[tuple[tuple[float, float], int]]:
    out = []
    for ln, rec in _iter_jsonl(path):
        try:
            out.append(((float(rec["x"]), float(rec["y"])), int(rec["class"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad truth record: {e}", path, ln) from e
    return out


def write_truth(path, truth) -> None:
    buf = io.StringIO()
    for (x, y), c in truth:
        json.dump({"x": x, "y": y, "class": c}, buf)
        buf.write("\n")
    atomic_write_text(path, buf.getvalue())


def read_road_network(path) -> np.ndarray:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON: {e.msg}", path) from e
    try:
        pts = np.asarray(doc["intersections"], dtype=float).reshape(-1, 2)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad road network: {e}", path) from e
    return pts


def write_road_network(path, intersections) -> None:
    doc = {"intersections": [[float(x), float(y)] for x, y in intersections]}
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def batch_from_rays(rays, truth=None) -> SceneBatch:
    """Wrap loose rays into a SceneBatch with a tight bounding box."""
    if rays:
        xs = [r.origin[0] for r in rays]
        ys = [r.origin[1] for r in rays]
        box = Rect(min(xs), min(ys), max(xs), max(ys))
    else:
        box = Rect(0.0, 0.0, 1.0, 1.0)
    return SceneBatch(rays=tuple(rays), bounding_box=box,
                      ground_truth=tuple(truth) if truth is not None else None)


# -- configuration ------------------------------------------------------------

def _params_from_dict(d) -> "SensorParams":
    from .domain import SensorParams
    return SensorParams(**d)


def load_config(path):
    """One JSON document with optional "em", "train", "params" sections.

    Missing values fall back to the dataclass defaults; the filled config is
    echoed into the run manifest.  "params" is either one parameter set or a
    mapping class id -> parameter set.
    """
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON: {e.msg}", path) from e
    from .domain import InvariantError
    try:
        em = EmConfig(**doc.get("em", {}))
        tr = TrainConfig(**doc.get("train", {}))
        raw = doc.get("params", {})
        if raw and all(isinstance(v, dict) for v in raw.values()):
            params = {int(c): _params_from_dict(v) for c, v in raw.items()}
        else:
            params = {1: _params_from_dict(raw)}
    except InvariantError:
        raise   # config parses but violates a documented invariant
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad config: {e}", path) from e
    return {"em": em, "train": tr, "params": params, "raw": doc}


def config_snapshot(em: EmConfig, train: TrainConfig, params) -> dict:
    return {
        "em": asdict(em),
        "train": asdict(train),
        "params": {str(c): asdict(p) for c, p in params.items()},
    }


# -- hypotheses and metrics ---------------------------------------------------

def write_hypotheses(path, hypotheses) -> None:
    buf = io.StringIO()
    for h in hypotheses:
        cov = np.asarray(h.covariance, dtype=float)
        json.dump({
            "x": h.position[0], "y": h.position[1],
            "existence": h.existence,
            "class": h.class_id,
            "cov": [[cov[0, 0], cov[0, 1]], [cov[1, 0], cov[1, 1]]],
            "n_rays": len(h.assignment_marginals),
        }, buf)
        buf.write("\n")
    atomic_write_text(path, buf.getvalue())


def read_hypotheses(path) -> list[ObjectHypothesis]:
    out = []
    for ln, rec in _iter_jsonl(path):
        try:
            out.append(ObjectHypothesis(
                position=(float(rec["x"]), float(rec["y"])),
                existence=float(rec["existence"]),
                covariance=np.asarray(rec["cov"], dtype=float),
                assignment_marginals={},
                class_id=int(rec.get("class", 0)),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad hypothesis record: {e}", path, ln) from e
    return out


def write_geojson(path, hypotheses, truth=None) -> None:
    """Point overlay of predictions (and truth) in local planar meters.

    Coordinates are meters in the local east/north frame, not geodetic;
    noted in the collection properties.
    """
    feats = []
    for h in hypotheses:
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Point",
                         "coordinates": [h.position[0], h.position[1]]},
            "properties": {"kind": "prediction", "existence": h.existence,
                           "class": h.class_id},
        })
    for (x, y), c in (truth or ()):
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [x, y]},
            "properties": {"kind": "truth", "class": c},
        })
    doc = {
        "type": "FeatureCollection",
        "properties": {"crs_note": "local planar meters (east, north); "
                                   "not a geodetic CRS"},
        "features": feats,
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def write_metrics_csv(path, rows) -> None:
    """rows: iterables of (class, threshold, precision, recall, auc)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "threshold", "precision", "recall", "auc"])
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def write_trace_csv(path, trace) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["class", "step", "epoch", "batch", "lr", "skipped",
            "elbo", "data", "entropy", "prior"]
    w.writerow(cols)
    for rec in trace:
        w.writerow([repr(rec[c]) if isinstance(rec[c], float) else rec[c]
                    for c in cols])
    atomic_write_text(path, buf.getvalue())


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: dict, optimizer: dict | None = None,
                    train_config: TrainConfig | None = None) -> None:
    """Versioned parameter + optimizer state; byte-exact round trip."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "classes": {str(c): asdict(p) for c, p in sorted(params.items())},
    }
    if optimizer:
        doc["optimizer"] = {
            str(c): {"u": list(s.u), "m": list(s.m), "v": list(s.v), "t": s.t}
            for c, s in sorted(optimizer.items())
        }
    if train_config is not None:
        doc["train"] = asdict(train_config)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    from .domain import SensorParams
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON: {e.msg}", path) from e
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')}",
                         path)
    params = {int(c): SensorParams(**p) for c, p in doc["classes"].items()}
    optimizer = {}
    for c, s in doc.get("optimizer", {}).items():
        optimizer[int(c)] = AdamState(
            u=np.asarray(s["u"], dtype=float),
            m=np.asarray(s["m"], dtype=float),
            v=np.asarray(s["v"], dtype=float),
            t=int(s["t"]))
    train = TrainConfig(**doc["train"]) if "train" in doc else None
    return params, optimizer, train


# -- run manifests ------------------------------------------------------------

def write_manifest(path, command: str, config: dict, seed, inputs: dict,
                   outputs: dict, wall_clock_s: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: os.path.abspath(v) for k, v in inputs.items()},
        "outputs": {k: os.path.abspath(v) for k, v in outputs.items()},
        "code_version": __version__,
        "wall_clock_s": wall_clock_s,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
