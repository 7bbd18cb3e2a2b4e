"""BEV layout data model, synthetic road-scene generator and corruption stage.

A layout is a stack of binary class masks over an ego-centered grid. Classes
may overlap (a pedestrian crossing is also drivable). Row 0 is the far edge
of the grid; all geometry is computed in meters around the grid center so
the same scene renders at any resolution.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from mapprior.exceptions import ConfigurationError, ShapeError
from mapprior.presets import DEFAULT_CLASSES, config_hash


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_channels(channels) -> tuple:
    channels = tuple(str(c) for c in channels)
    if not channels:
        raise ConfigurationError("channel list must be non-empty")
    if len(set(channels)) != len(channels):
        raise ConfigurationError(f"duplicate channel names in {channels}")
    return channels


@dataclass(frozen=True, eq=False)
class _Grid:
    channels: tuple
    data: np.ndarray
    resolution: float = 1.0

    _dtype = np.float32

    def __post_init__(self):
        object.__setattr__(self, "channels", _check_channels(self.channels))
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[0] != len(self.channels):
            raise ShapeError(
                f"{type(self).__name__} data must have shape ({len(self.channels)}, H, W), got {data.shape}"
            )
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise ShapeError(f"empty spatial dims {data.shape[1:]}")
        object.__setattr__(self, "data", _freeze(self._validate(data)))
        object.__setattr__(self, "resolution", float(self.resolution))

    def _validate(self, data):
        return data.astype(self._dtype, copy=True)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[self.channels.index(name)]
        except ValueError:
            raise KeyError(f"unknown class {name!r}; have {self.channels}") from None

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.channels == other.channels
            and self.resolution == other.resolution
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    def __hash__(self):
        return hash((type(self).__name__, self.channels, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class LayoutGrid(_Grid):
    """Multi-label binary BEV map of shape (C, H, W), stored as uint8."""

    _dtype = np.uint8

    def _validate(self, data):
        if data.dtype == bool:
            return data.astype(np.uint8)
        if not np.isin(data, (0, 1)).all():
            raise ValueError("LayoutGrid cells must be 0 or 1")
        return data.astype(np.uint8, copy=True)

    def to_soft(self) -> "SoftLayout":
        return SoftLayout(self.channels, self.data.astype(np.float32), self.resolution)


@dataclass(frozen=True, eq=False)
class SoftLayout(_Grid):
    """Per-class probabilities in [0, 1], same layout as :class:`LayoutGrid`."""

    def _validate(self, data):
        data = data.astype(np.float32, copy=True)
        if not np.isfinite(data).all() or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("SoftLayout values must lie in [0, 1]")
        return data

    def binarize(self, threshold: float = 0.5) -> LayoutGrid:
        return LayoutGrid(self.channels, self.data >= threshold, self.resolution)


@dataclass(frozen=True, eq=False)
class PseudoSensor(_Grid):
    """Real-valued BEV feature grid standing in for sensor features."""

    def _validate(self, data):
        data = data.astype(np.float32, copy=True)
        if not np.isfinite(data).all():
            raise ValueError("PseudoSensor values must be finite")
        return data

    @property
    def feature_channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class GeneratorSpec:
    """Grid size, class list and road-topology knobs for the scene generator.

    Widths are in meters; line-like classes (divider, stop line) are drawn at
    least ``min_line_px`` pixels wide so they survive coarse grids.
    """

    height: int = 64
    width: int = 64
    resolution: float = 1.5625
    classes: tuple = DEFAULT_CLASSES
    n_roads: tuple = (1, 3)
    lanes_per_direction: tuple = (1, 3)
    lane_width_m: tuple = (3.0, 3.75)
    intersection_prob: float = 0.6
    diagonal_prob: float = 0.2
    walkway_width_m: tuple = (2.0, 4.0)
    crossing_width_m: tuple = (3.0, 4.5)
    stop_line_width_m: float = 0.6
    divider_width_m: float = 0.3
    carpark_prob: float = 0.4
    midblock_crossing_prob: float = 0.4
    min_line_px: float = 2.0

    def validate(self) -> "GeneratorSpec":
        if self.height < 1 or self.width < 1:
            raise ConfigurationError(f"grid size must be positive, got {self.height}x{self.width}")
        if not self.resolution > 0:
            raise ConfigurationError("resolution must be positive")
        channels = _check_channels(self.classes)
        unknown = set(channels) - set(DEFAULT_CLASSES)
        if unknown:
            raise ConfigurationError(f"generator cannot render classes {sorted(unknown)}")
        lo, hi = self.n_roads
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"n_roads range must satisfy 1 <= lo <= hi, got {self.n_roads}")
        for name in ("intersection_prob", "diagonal_prob", "carpark_prob", "midblock_crossing_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        return self

    def hash(self) -> str:
        return config_hash(self)

    @classmethod
    def from_preset(cls, preset, **overrides) -> "GeneratorSpec":
        return cls(
            height=preset.height, width=preset.width, resolution=preset.resolution,
            classes=tuple(preset.classes), **overrides,
        )


@dataclass
class _Road:
    angle: float
    offset: float
    half_width: float
    lane_width: float
    lanes: int
    walkway: float
    # filled during rendering
    along: np.ndarray = field(default=None, repr=False)
    across: np.ndarray = field(default=None, repr=False)

    @property
    def direction(self):
        return math.cos(self.angle), math.sin(self.angle)

    @property
    def normal(self):
        return -math.sin(self.angle), math.cos(self.angle)


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def generate_synthetic_layout(seed: int, spec: GeneratorSpec | None = None) -> LayoutGrid:
    """Render a random road scene.

    Roads are straight strips (axis-aligned or diagonal) with a center
    divider and lane separators, flanked by walkways. Crossing roads form
    intersections with crosswalks and stop lines on the approaches;
    rectangular car parks sit behind the walkways.
    """
    spec = (spec or GeneratorSpec()).validate()
    rng = np.random.default_rng(seed)
    H, W, res = spec.height, spec.width, spec.resolution
    extent = max(H, W) * res
    xs = (np.arange(W) + 0.5 - W / 2) * res
    ys = (H / 2 - np.arange(H) - 0.5) * res
    X, Y = np.meshgrid(xs, ys)
    half_px = spec.min_line_px * res / 2

    def new_road(angle, offset):
        lanes = int(rng.integers(spec.lanes_per_direction[0], spec.lanes_per_direction[1] + 1))
        lw = _uniform(rng, spec.lane_width_m)
        return _Road(angle, offset, lanes * lw, lw, lanes, _uniform(rng, spec.walkway_width_m))

    if rng.random() < spec.diagonal_prob:
        base_angle = math.pi / 4 * (1 if rng.random() < 0.5 else 3)
    else:
        base_angle = 0.0 if rng.random() < 0.5 else math.pi / 2
    roads = [new_road(base_angle, _uniform(rng, (-0.2 * extent, 0.2 * extent)))]
    n_roads = int(rng.integers(spec.n_roads[0], spec.n_roads[1] + 1))
    for _ in range(n_roads - 1):
        if rng.random() < spec.intersection_prob:
            roads.append(new_road(base_angle + math.pi / 2, _uniform(rng, (-0.3 * extent, 0.3 * extent))))
        else:
            road = new_road(base_angle, 0.0)
            first = roads[0]
            gap = first.half_width + first.walkway + road.half_width + road.walkway + _uniform(rng, (4.0, 12.0))
            road.offset = first.offset + gap * (1 if rng.random() < 0.5 else -1)
            if abs(road.offset) - road.half_width < 0.5 * extent:
                roads.append(road)

    masks = {name: np.zeros((H, W), dtype=bool) for name in DEFAULT_CLASSES}
    road_masks = []
    for road in roads:
        ux, uy = road.direction
        nx, ny = road.normal
        road.along = X * ux + Y * uy
        road.across = X * nx + Y * ny - road.offset
        inside = np.abs(road.across) <= road.half_width
        road_masks.append(inside)
        masks["drivable"] |= inside
        masks["walkway"] |= (np.abs(road.across) > road.half_width) & (
            np.abs(road.across) <= road.half_width + road.walkway
        )

    divider_hw = max(spec.divider_width_m / 2, half_px)
    stop_hw = max(spec.stop_line_width_m / 2, half_px)
    for i, road in enumerate(roads):
        div = np.abs(road.across) <= divider_hw
        # lane separators only where a lane is wide enough to keep them apart
        separators = road.lanes if road.lane_width >= 6 * divider_hw else 1
        for k in range(1, separators):
            for sign in (-1, 1):
                div |= np.abs(road.across - sign * k * road.lane_width) <= divider_hw
        junction = np.zeros((H, W), dtype=bool)
        has_junction = False
        for j, other in enumerate(roads):
            if j == i:
                continue
            sin_t = math.sin(other.angle - road.angle)
            if abs(sin_t) < 1e-6:
                continue
            has_junction = True
            # along-coordinate on `road` of the crossing point of the two center lines
            a0 = _crossing_along(road, other)
            walk_reach = (other.half_width + other.walkway) / abs(sin_t)
            cw = _uniform(rng, spec.crossing_width_m)
            for side in (-1, 1):
                center = a0 + side * (walk_reach + cw / 2)
                crossing = (np.abs(road.along - center) <= cw / 2) & road_masks[i]
                masks["ped_crossing"] |= crossing
                stop_center = a0 + side * (walk_reach + cw + 1.0 + stop_hw)
                approach = road.across * side >= 0
                masks["stop_line"] |= (np.abs(road.along - stop_center) <= stop_hw) & approach & road_masks[i]
            junction |= np.abs(road.along - a0) <= walk_reach + cw + 1.0
            junction |= road_masks[j]
        if not has_junction and rng.random() < spec.midblock_crossing_prob:
            cw = _uniform(rng, spec.crossing_width_m)
            center = _uniform(rng, (-0.35 * extent, 0.35 * extent))
            masks["ped_crossing"] |= (np.abs(road.along - center) <= cw / 2) & road_masks[i]
            junction |= np.abs(road.along - center) <= cw / 2 + 0.5
        masks["divider"] |= div & road_masks[i] & ~junction

    if rng.random() < spec.carpark_prob:
        road = roads[int(rng.integers(len(roads)))]
        side = 1 if rng.random() < 0.5 else -1
        depth = _uniform(rng, (8.0, 20.0))
        length = _uniform(rng, (12.0, 30.0))
        start = _uniform(rng, (-0.4 * extent, 0.4 * extent - length))
        near = road.half_width + road.walkway
        d = road.across * side
        masks["carpark"] |= (d > near) & (d <= near + depth) & (road.along >= start) & (road.along <= start + length)

    drivable = masks["drivable"]
    masks["walkway"] &= ~drivable
    masks["carpark"] &= ~drivable & ~masks["walkway"]
    masks["divider"] &= drivable & ~masks["ped_crossing"]
    masks["ped_crossing"] &= drivable
    masks["stop_line"] &= drivable & ~masks["ped_crossing"]

    data = np.stack([masks[name] for name in spec.classes])
    return LayoutGrid(spec.classes, data, res)


def _crossing_along(road: _Road, other: _Road) -> float:
    # solve p.n_r = o_r, p.n_o = o_o for the intersection point p, return p.u_r
    n1 = np.array(road.normal)
    n2 = np.array(other.normal)
    p = np.linalg.solve(np.stack([n1, n2]), np.array([road.offset, other.offset]))
    return float(p @ np.array(road.direction))


@dataclass(frozen=True)
class CorruptionParams:
    """Strength knobs for simulating a noisy predictive-stage output.

    Rates are fractions in [0, 1]. ``patch_size_range`` and
    ``boundary_jitter_px`` are in pixels. ``radial_attenuation`` scales an
    erasure probability that grows with distance from the grid center.
    """

    dropout_patch_rate: float = 0.15
    patch_size_range: tuple = (6, 14)
    boundary_jitter_px: float = 1.5
    speckle_rate: float = 0.01
    radial_attenuation: float = 0.6
    seed: int = 0

    def validate(self) -> "CorruptionParams":
        for name in ("dropout_patch_rate", "speckle_rate", "radial_attenuation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.boundary_jitter_px < 0:
            raise ConfigurationError("boundary_jitter_px must be >= 0")
        lo, hi = self.patch_size_range
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"invalid patch_size_range {self.patch_size_range}")
        return self

    @classmethod
    def zero(cls, seed: int = 0) -> "CorruptionParams":
        return cls(0.0, (1, 1), 0.0, 0.0, 0.0, seed)

    def with_seed(self, seed: int) -> "CorruptionParams":
        return dataclasses.replace(self, seed=int(seed))


def radial_distance(height: int, width: int) -> np.ndarray:
    """Distance from the grid center, normalized so the corners are 1."""
    yy = np.arange(height) + 0.5 - height / 2
    xx = np.arange(width) + 0.5 - width / 2
    r = np.sqrt(yy[:, None] ** 2 + xx[None, :] ** 2)
    return r / r.max()


def _coarse_field(rng, shape, cell: int) -> np.ndarray:
    h, w = shape
    coarse = rng.random((math.ceil(h / cell) + 1, math.ceil(w / cell) + 1))
    zoom = ndimage.zoom(coarse, cell, order=1, mode="nearest", grid_mode=False)
    return zoom[:h, :w]


def corrupt(gt: LayoutGrid, params: CorruptionParams | None = None) -> tuple[SoftLayout, PseudoSensor]:
    """Turn a ground-truth layout into a noisy probability map and sensor features.

    Corruptions, in order: boundary jitter (smooth random erode/dilate),
    speckle flips, then erasure by rectangular dropout patches and by a
    range-dependent blackout. Cells left untouched keep their exact 0/1
    value; corrupted cells get soft, deliberately over- or under-confident
    probabilities.
    """
    params = (params or CorruptionParams()).validate()
    rng = np.random.default_rng(params.seed)
    C, H, W = gt.shape
    truth = gt.data.astype(bool)
    state = truth.copy()
    touched = np.zeros_like(truth)

    if params.boundary_jitter_px > 0:
        j = params.boundary_jitter_px
        for c in range(C):
            if not truth[c].any() or truth[c].all():
                continue
            inside = ndimage.distance_transform_edt(truth[c])
            outside = ndimage.distance_transform_edt(~truth[c])
            signed = np.where(truth[c], inside, -outside + 1.0)
            shift = (_coarse_field(rng, (H, W), 8) * 2.0 - 1.0) * j
            state[c] = signed > shift + 0.5
    jittered = state != truth
    touched |= jittered

    speckle = rng.random((C, H, W)) < params.speckle_rate
    state ^= speckle
    touched |= speckle

    erased = np.zeros((H, W), dtype=bool)
    if params.dropout_patch_rate > 0:
        lo, hi = params.patch_size_range
        target = params.dropout_patch_rate * H * W
        for _ in range(10_000):
            if erased.sum() >= target:
                break
            ph, pw = rng.integers(lo, hi + 1, size=2)
            r0 = int(rng.integers(0, max(H - ph, 0) + 1))
            c0 = int(rng.integers(0, max(W - pw, 0) + 1))
            erased[r0 : r0 + ph, c0 : c0 + pw] = True
    if params.radial_attenuation > 0:
        field_ = _coarse_field(rng, (H, W), 4)
        erased |= field_ < params.radial_attenuation * radial_distance(H, W) ** 2
    touched |= erased[None]

    prob = truth.astype(np.float32)
    u = rng.random((C, H, W)).astype(np.float32)
    flipped_on = touched & state
    flipped_off = touched & ~state
    prob[flipped_on] = 0.55 + 0.4 * u[flipped_on]
    prob[flipped_off] = 0.05 + 0.35 * u[flipped_off]
    erase_vals = 0.2 * rng.random((C, H, W)).astype(np.float32)
    prob = np.where(erased[None], erase_vals, prob)

    noisy = SoftLayout(gt.channels, prob, gt.resolution)
    features = make_pseudo_sensor(noisy, rng)
    return noisy, features


def make_pseudo_sensor(noisy: SoftLayout, rng: np.random.Generator | int) -> PseudoSensor:
    """Stack [noisy channels, normalized radial distance, Gaussian noise]."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    C, H, W = noisy.shape
    dist = radial_distance(H, W)[None].astype(np.float32)
    noise = rng.standard_normal((1, H, W)).astype(np.float32)
    data = np.concatenate([noisy.data, dist, noise], axis=0)
    names = [f"noisy:{c}" for c in noisy.channels] + ["radial", "noise"]
    return PseudoSensor(tuple(names), data, noisy.resolution)


def stack(grids) -> np.ndarray:
    """Stack a sequence of grids into an (N, C, H, W) array."""
    return np.stack([g.data for g in grids])
