"""Core value types shared by every other module.

Coordinates are local planar meters (east, north).  Conversion from
latitude/longitude is the data producer's responsibility; the CLI offers an
approximate equirectangular conversion around a declared reference point.
All types here are immutable after construction and safe to share between
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PARAM_GAIN",
    "Rect",
    "Ray",
    "ObjectHypothesis",
    "SceneBatch",
    "SensorParams",
    "InvariantError",
    "make_ray",
    "wrap_angle",
    "rays_to_arrays",
]

# Gain of the unconstrained parameterization of SensorParams: one unit of an
# unconstrained coordinate spans GAIN nats of the underlying transform.  Adam
# moves at most `lr` per coordinate per step, so the gain fixes how much a
# single step at the reference learning rate (1e-3) can change a parameter
# (~2.5% multiplicatively).  See SensorParams.to_unconstrained.
PARAM_GAIN = 25.0

_TWO_PI = 2.0 * math.pi


class InvariantError(ValueError):
    """A constructed value violates one of its documented invariants."""


def wrap_angle(a: float) -> float:
    """Reduce an angle to the interval (-pi, pi].

    Bitwise idempotent (IEEE remainder is exact); the result is congruent
    to ``a`` modulo 2*pi.
    """
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a!r}")
    w = math.remainder(a, _TWO_PI)
    if w <= -math.pi:
        w += _TWO_PI
    return w


@dataclass(frozen=True, slots=True)
class Rect:
    """Axis-aligned rectangle in meters."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax >= self.xmin and self.ymax >= self.ymin):
            raise InvariantError(f"degenerate rectangle {self}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        return (
            self.xmin - margin <= x <= self.xmax + margin
            and self.ymin - margin <= y <= self.ymax + margin
        )

    def expanded(self, margin: float) -> "Rect":
        return Rect(self.xmin - margin, self.ymin - margin,
                    self.xmax + margin, self.ymax + margin)


@dataclass(frozen=True, slots=True)
class Ray:
    """One detection: camera origin plus a unit bearing, no depth.

    Attributes
    ----------
    origin:
        (east, north) position of the camera in meters.
    bearing:
        Unit direction of the detection.
    confidence:
        Detector score in [0, 1].
    class_id:
        Object class this detection belongs to.
    frame_id:
        Opaque identifier of the camera frame.
    theta:
        Bearing angle in (-pi, pi].  Stored explicitly (derived from the
        vector when absent) so angle-based file formats round-trip exactly.
    """

    origin: tuple[float, float]
    bearing: tuple[float, float]
    confidence: float
    class_id: int
    frame_id: str
    theta: float = None

    def __post_init__(self):
        ox, oy = self.origin
        bx, by = self.bearing
        if self.theta is None:
            object.__setattr__(self, "theta",
                               wrap_angle(math.atan2(by, bx)))
        if not all(math.isfinite(v) for v in (ox, oy, bx, by, self.theta,
                                              self.confidence)):
            raise InvariantError("ray fields must be finite")
        if abs(math.hypot(bx, by) - 1.0) > 1e-9:
            raise InvariantError(f"bearing must be unit norm, got {self.bearing}")
        if abs(self.theta) > math.pi \
                or math.hypot(bx - math.cos(self.theta),
                              by - math.sin(self.theta)) > 1e-9:
            raise InvariantError("theta inconsistent with bearing")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvariantError(f"confidence must be in [0,1], got {self.confidence}")

    @property
    def bearing_angle(self) -> float:
        return self.theta


def make_ray(origin, bearing_angle: float, confidence: float, class_id: int,
             frame_id: str) -> Ray:
    """Build a Ray from an origin and a bearing angle in radians."""
    ox, oy = float(origin[0]), float(origin[1])
    if not (math.isfinite(ox) and math.isfinite(oy) and math.isfinite(bearing_angle)):
        raise ValueError("non-finite ray inputs")
    if not (math.isfinite(confidence) and 0.0 <= confidence <= 1.0):
        raise ValueError(f"confidence must be in [0,1], got {confidence!r}")
    theta = wrap_angle(float(bearing_angle))
    return Ray(
        origin=(ox, oy),
        bearing=(math.cos(theta), math.sin(theta)),
        confidence=float(confidence),
        class_id=int(class_id),
        frame_id=str(frame_id),
        theta=theta,
    )


@dataclass(frozen=True, slots=True)
class ObjectHypothesis:
    """A candidate map object with its posterior summaries.

    ``assignment_marginals`` maps ray index -> marginal probability that the
    ray was generated by this object.
    """

    position: tuple[float, float]
    existence: float
    covariance: np.ndarray
    assignment_marginals: dict[int, float]
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.existence <= 1.0 + 1e-9:
            raise InvariantError(f"existence must be in [0,1], got {self.existence}")
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2) or abs(cov[0, 1] - cov[1, 0]) > 1e-9:
            raise InvariantError("covariance must be symmetric 2x2")
        tr, det = cov[0, 0] + cov[1, 1], cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        if tr < -1e-9 or det < -1e-9:
            raise InvariantError("covariance must be positive semi-definite")
        for j, a in self.assignment_marginals.items():
            if not -1e-9 <= a <= 1.0 + 1e-9:
                raise InvariantError(f"assignment marginal out of [0,1] for ray {j}")


def check_ray_normalization(hypotheses: list[ObjectHypothesis], n_rays: int,
                            tol: float = 1e-6) -> None:
    """Verify that per-ray assignment mass (incl. the null option) sums to 1.

    Rays absent from every hypothesis carry null mass 1 and trivially pass.
    """
    total = np.zeros(n_rays)
    for h in hypotheses:
        for j, a in h.assignment_marginals.items():
            total[j] += a
    if total.size and total.max() > 1.0 + tol:
        j = int(np.argmax(total))
        raise InvariantError(
            f"assignment mass for ray {j} exceeds 1: {total[j]:.8f}")


@dataclass(frozen=True)
class SceneBatch:
    """A batch of rays over a bounded region, with optional ground truth.

    ``ground_truth`` holds (position, class_id) pairs.  Every ray origin must
    lie inside ``bounding_box`` expanded by ``margin`` meters.
    """

    rays: tuple[Ray, ...]
    bounding_box: Rect
    ground_truth: tuple[tuple[tuple[float, float], int], ...] | None = None
    margin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rays", tuple(self.rays))
        if self.ground_truth is not None:
            object.__setattr__(
                self, "ground_truth",
                tuple(((float(p[0]), float(p[1])), int(c))
                      for p, c in self.ground_truth))
        for k, r in enumerate(self.rays):
            if not self.bounding_box.contains(*r.origin, margin=self.margin):
                raise InvariantError(
                    f"ray {k} origin {r.origin} outside bounding box "
                    f"{self.bounding_box} (margin {self.margin})")

    def __len__(self) -> int:
        return len(self.rays)

    def class_ids(self) -> list[int]:
        return sorted({r.class_id for r in self.rays})

    def filter_class(self, class_id: int) -> "SceneBatch":
        rays = tuple(r for r in self.rays if r.class_id == class_id)
        truth = None
        if self.ground_truth is not None:
            truth = tuple((p, c) for p, c in self.ground_truth if c == class_id)
        return SceneBatch(rays, self.bounding_box, truth, self.margin)


def rays_to_arrays(rays) -> dict[str, np.ndarray]:
    """Pack rays into flat float64 arrays for the numeric kernels."""
    n = len(rays)
    ox = np.empty(n)
    oy = np.empty(n)
    theta = np.empty(n)
    conf = np.empty(n)
    for k, r in enumerate(rays):
        ox[k], oy[k] = r.origin
        theta[k] = r.bearing_angle
        conf[k] = r.confidence
    return {"ox": ox, "oy": oy, "theta": theta, "conf": conf}


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True, slots=True)
class SensorParams:
    """Per-class sensor calibration (the 8 trainable scalars).

    Attributes
    ----------
    radial_rate:
        Rate of the exponential radial visibility law, 1/m.
    angular_sigma:
        Intrinsic angular noise of a detection, radians.
    gps_sigma:
        Positional noise of the camera origin, meters.  Enters the angular
        concentration as ``kappa(r) = 1 / (angular_sigma^2 + (gps_sigma/r)^2)``.
    detect_ceiling:
        Maximum per-frame detection probability, in (0, 1).
    conf_slope, conf_intercept:
        Affine map from logit(detector confidence) to the detection logit.
    clutter_density:
        Uniform false-detection density over the observable window, 1/(m*rad).
    existence_logit:
        Prior log-odds that a candidate object exists.
    """

    radial_rate: float = 0.02
    angular_sigma: float = 0.05
    gps_sigma: float = 3.0
    detect_ceiling: float = 0.8
    conf_slope: float = 1.0
    conf_intercept: float = 0.0
    clutter_density: float = 1e-3
    existence_logit: float = 0.0

    FIELD_ORDER = ("radial_rate", "angular_sigma", "gps_sigma",
                   "detect_ceiling", "conf_slope", "conf_intercept",
                   "clutter_density", "existence_logit")

    def __post_init__(self):
        if not self.radial_rate > 0:
            raise InvariantError("radial_rate must be > 0")
        if not self.angular_sigma > 0:
            raise InvariantError("angular_sigma must be > 0")
        if self.gps_sigma < 0:
            raise InvariantError("gps_sigma must be >= 0")
        if not 0.0 < self.detect_ceiling < 1.0:
            raise InvariantError("detect_ceiling must be in (0,1)")
        if not self.clutter_density > 0:
            raise InvariantError("clutter_density must be > 0")
        for name in self.FIELD_ORDER:
            if not math.isfinite(getattr(self, name)):
                raise InvariantError(f"{name} must be finite")

    def as_array(self) -> np.ndarray:
        """The 8 constrained values, in FIELD_ORDER."""
        return np.array([getattr(self, n) for n in self.FIELD_ORDER])

    def to_unconstrained(self) -> np.ndarray:
        """Map to unconstrained coordinates u with theta = T(PARAM_GAIN * u).

        T is exp for the positive parameters, the logistic for
        detect_ceiling, and identity for the unconstrained ones.
        """
        g = PARAM_GAIN
        return np.array([
            math.log(self.radial_rate) / g,
            math.log(self.angular_sigma) / g,
            math.log(self.gps_sigma) / g if self.gps_sigma > 0 else -np.inf,
            math.log(self.detect_ceiling / (1.0 - self.detect_ceiling)) / g,
            self.conf_slope / g,
            self.conf_intercept / g,
            math.log(self.clutter_density) / g,
            self.existence_logit / g,
        ])

    @classmethod
    def from_unconstrained(cls, u) -> "SensorParams":
        g = PARAM_GAIN
        u = np.asarray(u, dtype=float)
        if u.shape != (8,):
            raise ValueError(f"expected 8 coordinates, got shape {u.shape}")
        return cls(
            radial_rate=math.exp(g * u[0]),
            angular_sigma=math.exp(g * u[1]),
            gps_sigma=math.exp(g * u[2]),
            detect_ceiling=_sigmoid(g * u[3]),
            conf_slope=g * u[4],
            conf_intercept=g * u[5],
            clutter_density=math.exp(g * u[6]),
            existence_logit=g * u[7],
        )

    def unconstrained_jacobian(self) -> np.ndarray:
        """d(constrained)/d(unconstrained), evaluated at this point."""
        g = PARAM_GAIN
        c = self.detect_ceiling
        return np.array([
            g * self.radial_rate,
            g * self.angular_sigma,
            g * self.gps_sigma,
            g * c * (1.0 - c),
            g,
            g,
            g * self.clutter_density,
            g,
        ])
