"""Synthetic scene generation straight from the generative model.

Objects are placed from the configured position prior; every (frame, object)
pair draws a detection with the model's detection probability, and detected
rays get a Von Mises bearing residual whose concentration follows the
radius-dependent law of the sensor model.  Recorded frame origins carry
Gaussian GPS jitter; bearings are sampled around the direction from the
*recorded* origin, so the emitted rays follow the sensor likelihood exactly.
Clutter rays are Poisson per frame with uniform bearing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sensor
from .domain import Ray, Rect, SceneBatch, SensorParams
from .priors import PriorDensity

__all__ = ["SynthConfig", "generate"]

_HUGE_KAPPA = 1e8  # above this, sample the wrapped-normal approximation


@dataclass(frozen=True)
class SynthConfig:
    """Scene recipe: region, objects, frames, truth parameters, clutter."""

    region: Rect = Rect(0.0, 0.0, 500.0, 500.0)
    n_objects: dict[int, int] = field(default_factory=lambda: {1: 20})
    density: float | None = None      # objects per m^2, overrides n_objects
    n_frames: int = 100
    frame_placement: str = "grid"     # grid | random | along-streets
    params: dict[int, SensorParams] = field(
        default_factory=lambda: {1: SensorParams()})
    clutter_rate: float = 0.0         # expected false rays per frame
    seed: int = 0
    placement_prior: PriorDensity | None = None
    conf_beta: tuple[float, float] = (5.0, 2.0)
    clutter_conf_beta: tuple[float, float] = (2.0, 5.0)
    min_separation: float = 0.0       # minimum object spacing, meters
    frame_margin: float = 0.0         # frames may roam this far outside region

    def __post_init__(self):
        if self.frame_placement not in ("grid", "random", "along-streets"):
            raise ValueError(
                f"unknown frame placement {self.frame_placement!r}")
        if self.n_frames <= 0:
            raise ValueError("n_frames must be positive")
        if self.clutter_rate < 0:
            raise ValueError("clutter_rate must be >= 0")
        for c in self.object_counts():
            if c < 0:
                raise ValueError("object counts must be >= 0")
            if self.density is None and not self.params:
                raise ValueError("params required")

    def object_counts(self) -> dict[int, int]:
        if self.density is not None:
            total = max(0, round(self.density * self.region.area))
            classes = sorted(self.params)
            return {c: total // len(classes) for c in classes}
        return dict(self.n_objects)


def _sample_positions(rng, n: int, region: Rect,
                      prior: PriorDensity | None,
                      min_separation: float = 0.0) -> np.ndarray:
    lo = np.array([region.xmin, region.ymin])
    hi = np.array([region.xmax, region.ymax])

    def draw():
        if prior is None or prior.kind == "uniform":
            return rng.uniform(lo, hi)
        w = prior.default_affinity if not prior.affinity else \
            float(np.mean(list(prior.affinity.values())))
        if rng.uniform() < w:
            center = prior.intersections[rng.integers(len(prior.intersections))]
            return rng.normal(center, prior.intersection_radius)
        return rng.uniform(lo, hi)

    out = np.empty((n, 2))
    for k in range(n):
        for _ in range(10_000):
            cand = draw()
            if min_separation <= 0.0 or k == 0:
                break
            d2 = np.sum((out[:k] - cand) ** 2, axis=1)
            if d2.min() >= min_separation ** 2:
                break
        else:
            raise ValueError("could not place objects at the requested "
                             "minimum separation")
        out[k] = cand
    return out


def _frame_origins(rng, config: SynthConfig) -> np.ndarray:
    region = config.region.expanded(config.frame_margin)
    n = config.n_frames
    if config.frame_placement == "random":
        return rng.uniform([region.xmin, region.ymin],
                           [region.xmax, region.ymax], size=(n, 2))
    if config.frame_placement == "grid":
        side = int(math.ceil(math.sqrt(n)))
        xs = np.linspace(region.xmin, region.xmax, side + 2)[1:-1]
        ys = np.linspace(region.ymin, region.ymax, side + 2)[1:-1]
        gx, gy = np.meshgrid(xs, ys)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        return pts[:n]
    # along-streets: uniform points on segments joining each intersection
    # to its nearest neighbor
    prior = config.placement_prior
    if prior is None or prior.intersections is None:
        raise ValueError("along-streets placement needs a placement_prior "
                         "with intersections")
    pts = prior.intersections
    if len(pts) < 2:
        raise ValueError("along-streets placement needs >= 2 intersections")
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    nearest = np.argmin(d2, axis=1)
    segs = np.stack([pts, pts[nearest]], axis=1)   # (K, 2, 2)
    pick = rng.integers(len(segs), size=n)
    t = rng.uniform(size=(n, 1))
    return segs[pick, 0] + t * (segs[pick, 1] - segs[pick, 0])


def _vonmises(rng, kappa: float) -> float:
    if kappa > _HUGE_KAPPA:
        return float(rng.normal(0.0, 1.0 / math.sqrt(kappa)))
    return float(rng.vonmises(0.0, kappa))


def generate(config: SynthConfig) -> tuple[SceneBatch, list[int]]:
    """Sample a scene batch plus per-ray provenance labels.

    Provenance holds the generating object index, or -1 for clutter.
    Identical configs produce identical batches.
    """
    rng = np.random.default_rng(config.seed)
    counts = config.object_counts()
    classes = sorted(counts)

    obj_pos_list = []
    obj_class = []
    for c in classes:
        pos = _sample_positions(rng, counts[c], config.region,
                                config.placement_prior,
                                config.min_separation)
        obj_pos_list.append(pos)
        obj_class.extend([c] * counts[c])
    obj_pos = np.concatenate(obj_pos_list, axis=0) if obj_pos_list \
        else np.zeros((0, 2))
    n_obj = obj_pos.shape[0]

    frames = _frame_origins(rng, config)
    w0 = (sensor.FOV_HALF_WIDTH / sensor.FOV_EDGE_WIDTH)
    window0 = (1.0 / (1.0 + math.exp(-w0))) ** 2   # in-view factor at phi=0

    by_class = {c: np.flatnonzero(np.asarray(obj_class) == c)
                for c in classes}
    # objects beyond this range have detection probability < 1e-12 and are
    # skipped without consuming random draws
    gate = {c: 28.0 / config.params[c].radial_rate for c in classes}

    rays: list[Ray] = []
    provenance: list[int] = []
    for f in range(len(frames)):
        frame_id = f"f{f:05d}"
        for c in classes:
            p = config.params[c]
            idx = by_class[c]
            if idx.size == 0:
                continue
            rough = np.hypot(obj_pos[idx, 0] - frames[f, 0],
                             obj_pos[idx, 1] - frames[f, 1])
            idx = idx[rough <= gate[c]]
            n = idx.size
            if n == 0:
                continue
            # per-ray GPS jitter of the recorded origin; the model treats
            # rays independently, so per-frame correlation is not modeled
            if p.gps_sigma > 0:
                origins = frames[f] + rng.normal(0.0, p.gps_sigma,
                                                 size=(n, 2))
            else:
                origins = np.tile(frames[f], (n, 1))
            dx = obj_pos[idx, 0] - origins[:, 0]
            dy = obj_pos[idx, 1] - origins[:, 1]
            r = np.hypot(dx, dy)
            conf = rng.beta(*config.conf_beta, size=n)
            cc = np.clip(conf, 1e-12, 1.0 - 1e-12)
            delta = p.conf_slope * (np.log(cc) - np.log1p(-cc)) \
                + p.conf_intercept
            pd = p.detect_ceiling / (1.0 + np.exp(-delta)) \
                * np.exp(-p.radial_rate * r) * window0
            pd[r < sensor.EPS_R] = 0.0
            hit = rng.uniform(size=n) < pd
            for k in np.flatnonzero(hit):
                kappa = r[k] * r[k] / (p.angular_sigma ** 2 * r[k] * r[k]
                                       + p.gps_sigma ** 2)
                bearing = math.atan2(dy[k], dx[k]) + _vonmises(rng, kappa)
                rays.append(Ray(
                    origin=(float(origins[k, 0]), float(origins[k, 1])),
                    bearing=(math.cos(bearing), math.sin(bearing)),
                    confidence=float(conf[k]),
                    class_id=c,
                    frame_id=frame_id,
                ))
                provenance.append(int(idx[k]))
        if config.clutter_rate > 0:
            n_clutter = int(rng.poisson(config.clutter_rate))
            for _ in range(n_clutter):
                c = classes[rng.integers(len(classes))] if classes else 0
                sg = config.params[c].gps_sigma if c in config.params else 0.0
                origin = frames[f] + rng.normal(0.0, sg, size=2) \
                    if sg > 0 else frames[f].copy()
                bearing = float(rng.uniform(-math.pi, math.pi))
                rays.append(Ray(
                    origin=(float(origin[0]), float(origin[1])),
                    bearing=(math.cos(bearing), math.sin(bearing)),
                    confidence=float(rng.beta(*config.clutter_conf_beta)),
                    class_id=c,
                    frame_id=frame_id,
                ))
                provenance.append(-1)

    margin = 0.0
    for r_ in rays:
        ox, oy = r_.origin
        over = max(config.region.xmin - ox, ox - config.region.xmax,
                   config.region.ymin - oy, oy - config.region.ymax, 0.0)
        margin = max(margin, over)
    truth = tuple(((float(obj_pos[o, 0]), float(obj_pos[o, 1])), obj_class[o])
                  for o in range(n_obj))
    batch = SceneBatch(rays=tuple(rays), bounding_box=config.region,
                       ground_truth=truth, margin=margin + 1e-9)
    return batch, provenance
