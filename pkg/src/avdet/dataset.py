"""Synthetic audio-visual street scenes and the on-disk scene layout.

World frame: ``x`` runs along the road (image right), ``y`` is depth in front
of the camera, ``z`` is up.  The camera sits at ``(0, 0, camera_height_m)``
looking down ``+y``; the microphone array is mounted 5 cm below it in the
horizontal plane.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field, asdict
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import signal as sps
from scipy.io import wavfile

from .exceptions import ConfigError, LoadError, RangeError

SPEED_OF_SOUND = 343.0
SAMPLE_RATE = 44100
MIC_BELOW_CAMERA_M = 0.05
SOURCE_HEIGHT_M = 0.5
NEAR_PLANE_M = 0.5

# independent RNG streams per scene seed
_TRAFFIC, _BACKGROUND, _AMBIENT, _JITTER, _ENGINE = 1, 2, 3, 4, 1000


def _rng(seed, *stream):
    return np.random.default_rng([int(seed), *map(int, stream)])


class BBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


class ScoredBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float

    @property
    def box(self):
        return BBox(self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


def _positive(name, value):
    if not value > 0:
        raise ConfigError(name, f"must be > 0, got {value!r}")


def _nonneg(name, value):
    if not value >= 0:
        raise ConfigError(name, f"must be >= 0, got {value!r}")


@dataclass
class MicArray:
    n_mics: int = 7
    radius_m: float = 0.05
    angles_deg: list = field(default_factory=lambda: [0.0, 60.0, 120.0, 180.0, 240.0, 300.0])
    center_mic: bool = True
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        self.angles_deg = [float(a) for a in self.angles_deg]
        if self.n_mics not in (1, 2, 4, 6, 7):
            raise ConfigError("mics.n_mics", f"must be one of 1, 2, 4, 6, 7; got {self.n_mics}")
        if len(self.angles_deg) + int(self.center_mic) != self.n_mics:
            raise ConfigError("mics.angles_deg", "len(angles_deg) + center_mic must equal n_mics")
        if any(not 0 <= a < 360 for a in self.angles_deg):
            raise ConfigError("mics.angles_deg", "angles must lie in [0, 360)")
        if any(b <= a for a, b in zip(self.angles_deg, self.angles_deg[1:])):
            raise ConfigError("mics.angles_deg", "angles must be strictly increasing")
        _positive("mics.radius_m", self.radius_m)
        _positive("mics.speed_of_sound", self.speed_of_sound)

    def positions(self, height=0.0):
        """(n_mics, 3) positions; circular mics first, centre mic last."""
        a = np.deg2rad(np.asarray(self.angles_deg, dtype=float))
        pos = [np.stack([self.radius_m * np.cos(a), self.radius_m * np.sin(a),
                         np.full_like(a, height)], axis=1)]
        if self.center_mic:
            pos.append(np.array([[0.0, 0.0, height]]))
        return np.concatenate(pos, axis=0)


@dataclass
class CameraModel:
    image_width: int = 300
    image_height: int = 100
    fps: float = 5.0
    horizontal_fov_deg: float = 90.0

    def __post_init__(self):
        _positive("camera.image_width", self.image_width)
        _positive("camera.image_height", self.image_height)
        _positive("camera.fps", self.fps)
        if not 0 < self.horizontal_fov_deg < 180:
            raise ConfigError("camera.horizontal_fov_deg", "must lie in (0, 180)")

    @property
    def focal_px(self):
        return 0.5 * self.image_width / math.tan(math.radians(self.horizontal_fov_deg) / 2)

    @property
    def diagonal(self):
        return math.hypot(self.image_width, self.image_height)

    def project(self, x, y, z, camera_height):
        """Pinhole projection to continuous pixel coordinates (u right, v down)."""
        f = self.focal_px
        u = 0.5 * self.image_width + f * np.asarray(x) / np.asarray(y)
        v = 0.5 * self.image_height - f * (np.asarray(z) - camera_height) / np.asarray(y)
        return u, v


@dataclass
class EngineSoundSpec:
    base_freq_hz: float = 60.0
    n_harmonics: int = 8
    broadband_level: float = 0.5
    source_level: float = 1.0

    def __post_init__(self):
        _positive("emitter.base_freq_hz", self.base_freq_hz)
        _nonneg("emitter.n_harmonics", self.n_harmonics)
        _nonneg("emitter.broadband_level", self.broadband_level)
        _nonneg("emitter.source_level", self.source_level)


@dataclass
class VehicleTrack:
    """Piecewise-linear ground-plane path ``(t, x, y)`` of one vehicle."""

    times: list
    positions: list
    size: tuple = (4.5, 1.6)
    texture_seed: int = 0
    emitter: EngineSoundSpec = field(default_factory=EngineSoundSpec)
    fade_s: float = 0.0

    def __post_init__(self):
        _nonneg("track.fade_s", self.fade_s)
        self.times = [float(t) for t in self.times]
        self.positions = [tuple(float(c) for c in p) for p in self.positions]
        self.size = tuple(float(s) for s in self.size)
        if isinstance(self.emitter, dict):
            self.emitter = EngineSoundSpec(**self.emitter)
        if len(self.times) < 2 or len(self.times) != len(self.positions):
            raise ConfigError("track.path", "need >= 2 waypoints with one position per timestamp")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ConfigError("track.path", "timestamps must be strictly increasing")
        if any(len(p) != 2 for p in self.positions):
            raise ConfigError("track.path", "positions are (x, y) ground-plane pairs")
        if len(self.size) != 2 or min(self.size) <= 0:
            raise ConfigError("track.size", "width and height must be positive")

    @property
    def t_start(self):
        return self.times[0]

    @property
    def t_end(self):
        return self.times[-1]

    def position(self, t):
        """Ground position(s) at time(s) ``t``; clamped outside the path's span."""
        tt = np.asarray(self.times)
        p = np.asarray(self.positions)
        return np.interp(t, tt, p[:, 0]), np.interp(t, tt, p[:, 1])

    def active(self, t):
        return (np.asarray(t) >= self.t_start) & (np.asarray(t) <= self.t_end)


@dataclass
class ParkedVehicle:
    x: float
    y: float
    size: tuple = (4.5, 1.6)
    texture_seed: int = 0


@dataclass
class Scene:
    duration_s: float
    tracks: list
    camera: CameraModel = field(default_factory=CameraModel)
    mics: MicArray = field(default_factory=MicArray)
    ambient_level: float = 0.005
    seed: int = 0
    camera_height_m: float = 1.2
    n_clutter: int = 14
    parked: list = field(default_factory=list)
    jitter_px: int = 0
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        _positive("duration_s", self.duration_s)
        _nonneg("ambient_level", self.ambient_level)
        _nonneg("jitter_px", self.jitter_px)
        _positive("camera_height_m", self.camera_height_m)

    @property
    def n_frames(self):
        return int(round(self.duration_s * self.camera.fps))

    @property
    def n_samples(self):
        return int(round(self.duration_s * self.sample_rate_hz))

    @property
    def frame_times(self):
        return np.arange(self.n_frames) / self.camera.fps

    @property
    def mic_positions(self):
        return self.mics.positions(self.camera_height_m - MIC_BELOW_CAMERA_M)

    @cached_property
    def background(self):
        return _render_background(self)


@dataclass
class Frame:
    timestamp_s: float
    pixels: np.ndarray
    gt_boxes: list | None = None
    index: int = 0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def duration_s(self):
        return self.samples.shape[1] / self.sample_rate_hz


# ---------------------------------------------------------------- generation


@dataclass
class LaneSpec:
    """One straight road parallel to the image plane at depth ``y_m``.

    Lanes with ``y_m <= 0`` lie behind the camera: audible, never visible.
    """

    y_m: float = 8.0
    passes_per_min: float = 4.0
    speed_range: tuple = (6.0, 12.0)
    width_range: tuple = (3.6, 5.0)
    height_range: tuple = (1.4, 1.9)
    source_level_range: tuple = (0.8, 1.25)

    def __post_init__(self):
        _nonneg("lane.passes_per_min", self.passes_per_min)
        if abs(self.y_m) <= NEAR_PLANE_M:
            raise ConfigError("lane.y_m", "lane passes through the sensor")
        for name in ("speed_range", "width_range", "height_range", "source_level_range"):
            lo, hi = getattr(self, name)
            setattr(self, name, (float(lo), float(hi)))
            if not 0 < lo <= hi:
                raise ConfigError(f"lane.{name}", "need 0 < low <= high")


def _default_lanes():
    # two near lanes, an off-frustum road behind the sensor, and a far lane of
    # small quiet vehicles (cyclists) that are visible but barely audible
    return [LaneSpec(7.0, 3.0), LaneSpec(10.0, 3.0), LaneSpec(-12.0, 0.5),
            LaneSpec(26.0, 1.5, speed_range=(4.0, 7.0), width_range=(1.6, 2.2),
                     height_range=(1.1, 1.5), source_level_range=(0.05, 0.15))]


@dataclass
class TrafficSpec:
    lanes: list = field(default_factory=_default_lanes)
    base_freq_range: tuple = (35.0, 90.0)
    n_harmonics: int = 8
    broadband_level: float = 0.6
    half_length_m: float = 60.0
    fade_s: float = 1.0

    def __post_init__(self):
        self.lanes = [l if isinstance(l, LaneSpec) else LaneSpec(**l) for l in self.lanes]
        lo, hi = self.base_freq_range
        if not 0 < lo <= hi:
            raise ConfigError("traffic.base_freq_range", "need 0 < low <= high")
        _positive("traffic.half_length_m", self.half_length_m)
        _nonneg("traffic.fade_s", self.fade_s)


@dataclass
class SceneConfig:
    duration_s: float = 60.0
    camera: CameraModel = field(default_factory=CameraModel)
    mics: MicArray = field(default_factory=MicArray)
    ambient_level: float = 0.005
    traffic: TrafficSpec = field(default_factory=TrafficSpec)
    tracks: list | None = None
    n_clutter: int = 14
    n_parked: int = 0
    parked_lane_m: float = 14.0
    jitter_px: int = 0
    camera_height_m: float = 1.2

    def __post_init__(self):
        _positive("duration_s", self.duration_s)
        _nonneg("ambient_level", self.ambient_level)
        _nonneg("n_clutter", self.n_clutter)
        _nonneg("n_parked", self.n_parked)
        _nonneg("jitter_px", self.jitter_px)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown scene config key")
        if "camera" in d:
            d["camera"] = CameraModel(**d["camera"])
        if "mics" in d:
            d["mics"] = MicArray(**d["mics"])
        if "traffic" in d:
            d["traffic"] = TrafficSpec(**d["traffic"])
        if d.get("tracks") is not None:
            d["tracks"] = [tr if isinstance(tr, VehicleTrack) else VehicleTrack(**tr)
                           for tr in d["tracks"]]
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Build a deterministic scene from ``config``.

    Explicit ``config.tracks`` are used verbatim; otherwise traffic is sampled
    from ``config.traffic``.  Rear-lane vehicles are never visible but are
    audible.
    """
    if isinstance(config, dict):
        config = SceneConfig.from_dict(config)
    if config.tracks is not None:
        tracks = list(config.tracks)
    else:
        tracks = _sample_traffic(config, seed)
    rng = _rng(seed, _BACKGROUND, 1)
    parked = []
    if config.n_parked:
        half_w = config.parked_lane_m * math.tan(math.radians(config.camera.horizontal_fov_deg) / 2)
        for k in range(config.n_parked):
            parked.append(ParkedVehicle(
                x=float(rng.uniform(-half_w, half_w)), y=float(config.parked_lane_m),
                size=(float(rng.uniform(3.6, 5.0)), float(rng.uniform(1.4, 1.9))),
                texture_seed=int(rng.integers(2**31))))
    return Scene(duration_s=config.duration_s, tracks=tracks, camera=config.camera,
                 mics=config.mics, ambient_level=config.ambient_level, seed=int(seed),
                 camera_height_m=config.camera_height_m, n_clutter=config.n_clutter,
                 parked=parked, jitter_px=config.jitter_px)


def _sample_traffic(config, seed):
    tr = config.traffic
    rng = _rng(seed, _TRAFFIC)
    tracks = []
    for lane in tr.lanes:
        if lane.passes_per_min <= 0:
            continue
        # a pass lasts at most 2L / v_min; arrivals cover [-span/2, duration + span/2]
        # with gamma(4) headways, more regular than Poisson traffic
        span = 2 * tr.half_length_m / lane.speed_range[0]
        mean_gap = 60.0 / lane.passes_per_min
        t_mid = -span / 2 - rng.uniform(0, mean_gap)
        while True:
            t_mid += rng.gamma(4.0, mean_gap / 4.0)
            if t_mid > config.duration_s + span / 2:
                break
            direction = 1.0 if rng.random() < 0.5 else -1.0
            speed = rng.uniform(*lane.speed_range)
            t_half = tr.half_length_m / speed
            emitter = EngineSoundSpec(
                base_freq_hz=float(rng.uniform(*tr.base_freq_range)),
                n_harmonics=tr.n_harmonics, broadband_level=tr.broadband_level,
                source_level=float(rng.uniform(*lane.source_level_range)))
            tracks.append(VehicleTrack(
                times=[t_mid - t_half, t_mid + t_half],
                positions=[(-direction * tr.half_length_m, lane.y_m),
                           (direction * tr.half_length_m, lane.y_m)],
                size=(float(rng.uniform(*lane.width_range)), float(rng.uniform(*lane.height_range))),
                texture_seed=int(rng.integers(2**31)), emitter=emitter, fade_s=tr.fade_s))
    tracks.sort(key=lambda t: t.t_start)
    return tracks


# ---------------------------------------------------------------- rendering


def vehicle_texture(seed, shape=(16, 32)):
    """Body colour, dark window band with pillars, dark wheels, texel noise."""
    rng = np.random.default_rng(int(seed))
    h, w = shape
    hue = rng.random()
    body = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95)))
    tex = np.empty((h, w, 3))
    tex[:] = body
    tex[h // 2:] *= 0.85
    glass = np.array([0.12, 0.16, 0.22])
    r0, r1 = h // 8, int(h * 0.45)
    tex[r0:r1, w // 8: w - w // 8] = glass
    tex[r0:r1, w // 2 - 1: w // 2 + 1] = body
    tex[:r0, : w // 8] = body * 0.9
    wheel = np.array([0.04, 0.04, 0.05])
    wr = int(h * 0.72)
    for c0 in (w // 8, w - w // 8 - w // 5):
        tex[wr:, c0: c0 + w // 5] = wheel
    tex += rng.normal(0.0, 0.03, size=tex.shape)
    return np.clip(tex, 0.0, 1.0)


def _paint_textured_rect(canvas, u0, v0, u1, v1, tex):
    """Fill pixels whose centres lie in [u0,u1) x [v0,v1) with nearest texels."""
    H, W = canvas.shape[:2]
    j0, j1 = max(int(math.ceil(u0 - 0.5)), 0), min(int(math.ceil(u1 - 0.5)), W)
    i0, i1 = max(int(math.ceil(v0 - 0.5)), 0), min(int(math.ceil(v1 - 0.5)), H)
    if j1 <= j0 or i1 <= i0:
        return False
    th, tw = tex.shape[:2]
    cols = np.clip(((np.arange(j0, j1) + 0.5 - u0) / (u1 - u0) * tw).astype(int), 0, tw - 1)
    rows = np.clip(((np.arange(i0, i1) + 0.5 - v0) / (v1 - v0) * th).astype(int), 0, th - 1)
    canvas[i0:i1, j0:j1] = tex[rows[:, None], cols[None, :]]
    return True


def _render_background(scene):
    cam = scene.camera
    p = scene.jitter_px
    H, W = cam.image_height + 2 * p, cam.image_width + 2 * p
    rng = _rng(scene.seed, _BACKGROUND)
    img = np.empty((H, W, 3))
    horizon = cam.image_height / 2 + p
    rows = np.arange(H)[:, None] + 0.5
    sky_top, sky_bot = np.array([0.45, 0.62, 0.85]), np.array([0.78, 0.85, 0.92])
    frac = np.clip(rows / max(horizon, 1), 0, 1)
    img[:] = (sky_top * (1 - frac) + sky_bot * frac)[:, None, :].reshape(H, 1, 3)
    ground = rows[:, 0] >= horizon
    img[ground] = np.array([0.42, 0.48, 0.36]) + rng.normal(0, 0.015, size=(int(ground.sum()), W, 3))

    f = cam.focal_px
    ch = scene.camera_height_m

    def ground_row(y):
        return horizon + f * ch / y

    # road surface between 5 m and 13.5 m depth, plus a dashed centre marking
    r_far, r_near = ground_row(13.5), ground_row(5.0)
    i0, i1 = int(max(r_far, 0)), int(min(r_near, H))
    img[i0:i1] = np.array([0.33, 0.33, 0.35]) + rng.normal(0, 0.02, size=(max(i1 - i0, 0), W, 3))
    mark = int(ground_row(8.5))
    if 0 <= mark < H:
        dash = (np.arange(W) // 12) % 2 == 0
        img[mark, dash] = 0.85

    for _ in range(scene.n_clutter):
        kind = rng.random()
        depth = rng.uniform(18.0, 70.0)
        x = rng.uniform(-1.2, 1.2) * depth
        base = ground_row(depth)
        u = W / 2 + f * x / depth
        if kind < 0.45:  # building with window grid
            bw, bh = rng.uniform(6, 25), rng.uniform(5, 18)
            col = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.05, 0.3), rng.uniform(0.45, 0.8)))
            th, tw = 12, 12
            tex = np.tile(col, (th, tw, 1))
            tex[1::3, 1::3] = col * 0.45
            tex += rng.normal(0, 0.02, size=tex.shape)
        elif kind < 0.85:  # tree
            bw, bh = rng.uniform(2, 6), rng.uniform(4, 10)
            g = np.array([0.15, rng.uniform(0.35, 0.55), 0.15])
            tex = np.clip(g + rng.normal(0, 0.06, size=(8, 6, 3)), 0, 1)
            tex[-2:, 2:4] = [0.35, 0.25, 0.15]
        else:  # pole / sign
            bw, bh = rng.uniform(0.3, 0.8), rng.uniform(3, 6)
            tex = np.tile(np.array([0.5, 0.5, 0.52]), (4, 2, 1))
            tex[0] = [0.8, 0.15, 0.1]
        half = f * bw / depth / 2
        top = base - f * bh / depth
        _paint_textured_rect(img, u - half, top, u + half, base, np.clip(tex, 0, 1))

    for pv in sorted(scene.parked, key=lambda v: -v.y):
        u0, v0 = cam.project(pv.x - pv.size[0] / 2, pv.y, pv.size[1], ch)
        u1, v1 = cam.project(pv.x + pv.size[0] / 2, pv.y, 0.0, ch)
        _paint_textured_rect(img, u0 + p, v0 + p, u1 + p, v1 + p, vehicle_texture(pv.texture_seed))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def frame_jitter(scene, frame_index):
    """Integer image-plane offset of the (handheld) camera for one frame."""
    if scene.jitter_px == 0:
        return 0, 0
    dx, dy = _rng(scene.seed, _JITTER, frame_index).integers(-scene.jitter_px, scene.jitter_px + 1, 2)
    return int(dx), int(dy)


def vehicle_image_rect(scene, track, t, offset=(0, 0)):
    """Continuous projected rectangle ``(u0, v0, u1, v1)`` or None if behind the camera."""
    if not track.active(t):
        return None
    x, y = track.position(t)
    if y <= NEAR_PLANE_M:
        return None
    w, h = track.size
    cam = scene.camera
    u0, v0 = cam.project(x - w / 2, y, h, scene.camera_height_m)
    u1, v1 = cam.project(x + w / 2, y, 0.0, scene.camera_height_m)
    dx, dy = offset
    return float(u0) - dx, float(v0) - dy, float(u1) - dx, float(v1) - dy


def render_frame(scene: Scene, t: float) -> Frame:
    if not 0 <= t <= scene.duration_s:
        raise RangeError(f"t={t} outside [0, {scene.duration_s}]")
    cam = scene.camera
    W, H = cam.image_width, cam.image_height
    p = scene.jitter_px
    index = int(round(t * cam.fps))
    dx, dy = frame_jitter(scene, index)
    img = scene.background[p + dy: p + dy + H, p + dx: p + dx + W].copy()
    visible = []
    for track in scene.tracks:
        rect = vehicle_image_rect(scene, track, t, (dx, dy))
        if rect is not None:
            visible.append((float(track.position(t)[1]), track, rect))
    boxes = []
    for _, track, (u0, v0, u1, v1) in sorted(visible, key=lambda r: -r[0]):
        _paint_textured_rect(img, u0, v0, u1, v1, vehicle_texture(track.texture_seed))
        bx0, by0 = max(u0, 0.0), max(v0, 0.0)
        bx1, by1 = min(u1, float(W)), min(v1, float(H))
        if bx1 - bx0 >= 1.0 and by1 - by0 >= 1.0:
            boxes.append(BBox(bx0, by0, bx1, by1))
    return Frame(timestamp_s=float(t), pixels=img, gt_boxes=boxes, index=index)


def render_all(scene):
    return [render_frame(scene, float(t)) for t in scene.frame_times]


# ---------------------------------------------------------------- audio


def engine_signal(spec: EngineSoundSpec, n, rng, sample_rate=SAMPLE_RATE):
    """Unit-RMS harmonic stack plus low-passed noise, scaled to ``source_level``."""
    t = np.arange(n) / sample_rate
    sig = np.zeros(n)
    if spec.n_harmonics:
        phases = rng.uniform(0, 2 * np.pi, spec.n_harmonics)
        for k in range(1, spec.n_harmonics + 1):
            sig += np.sin(2 * np.pi * k * spec.base_freq_hz * t + phases[k - 1]) / k
        sig /= max(np.sqrt(np.mean(sig ** 2)), 1e-12)
    if spec.broadband_level > 0:
        noise = rng.standard_normal(n)
        sos = sps.butter(4, 2000.0, fs=sample_rate, output="sos")
        noise = sps.sosfilt(sos, noise)
        noise /= max(np.sqrt(np.mean(noise ** 2)), 1e-12)
        sig += spec.broadband_level * noise
    rms = np.sqrt(np.mean(sig ** 2)) if n else 0.0
    if rms > 0:
        sig *= spec.source_level / rms
    return sig


def _fade_envelope(t, track):
    if track.fade_s <= 0:
        return 1.0
    ramp = np.clip(np.minimum(t - track.t_start, track.t_end - t) / track.fade_s, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * ramp)


def synthesize_audio(scene: Scene) -> AudioClip:
    """Sum of delayed, 1/max(d, 1 m) attenuated engine signals plus ambient noise.

    Fractional delays are resolved by linear interpolation of the source
    waveform.
    """
    fs = scene.sample_rate_hz
    N = scene.n_samples
    mics = scene.mic_positions
    c = scene.mics.speed_of_sound
    out = np.zeros((len(mics), N))
    for k, track in enumerate(scene.tracks):
        n0 = max(int(math.floor(track.t_start * fs)), 0)
        n1 = min(int(math.ceil(track.t_end * fs)) + 1, N)
        if n1 <= n0:
            continue
        n = np.arange(n0, n1)
        t = n / fs
        x, y = track.position(t)
        max_dist = max(np.hypot(px, py) for px, py in track.positions) + 1.0
        pad = int(math.ceil(max_dist / c * fs)) + 2
        # source waveform on an integer grid starting before the first needed sample
        grid0 = n0 - pad
        src = engine_signal(track.emitter, n1 - grid0, _rng(scene.seed, _ENGINE, k), fs)
        env = _fade_envelope(t, track)
        for i, m in enumerate(mics):
            d = np.sqrt((x - m[0]) ** 2 + (y - m[1]) ** 2 + (SOURCE_HEIGHT_M - m[2]) ** 2)
            query = n - d / c * fs - grid0
            out[i, n0:n1] += env * np.interp(query, np.arange(src.size), src) / np.maximum(d, 1.0)
    if scene.ambient_level > 0:
        out += scene.ambient_level * _rng(scene.seed, _AMBIENT).standard_normal(out.shape)
    return AudioClip(samples=out.astype(np.float32), sample_rate_hz=fs)


def closest_approach_time(track: VehicleTrack, point=(0.0, 0.0)):
    """Time of minimum ground-plane distance to ``point`` along the path."""
    best_t, best_d = track.t_start, np.inf
    for (t0, p0), (t1, p1) in zip(zip(track.times, track.positions),
                                  zip(track.times[1:], track.positions[1:])):
        a, b, q = np.array(p0), np.array(p1), np.asarray(point, dtype=float)
        seg = b - a
        s = 0.0 if not seg.any() else float(np.clip(np.dot(q - a, seg) / np.dot(seg, seg), 0, 1))
        d = float(np.linalg.norm(a + s * seg - q))
        if d < best_d:
            best_t, best_d = t0 + s * (t1 - t0), d
    return best_t


# ---------------------------------------------------------------- disk layout


@dataclass
class RecordedScene:
    frames: list
    audio: AudioClip
    fps: float
    camera: CameraModel | None = None
    mics: MicArray | None = None
    has_annotations: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def timestamps(self):
        return [f.timestamp_s for f in self.frames]


def _box_list(boxes):
    return [[float(v) for v in b[:4]] for b in boxes]


def write_scene(scene: Scene, directory, audio: AudioClip | None = None, frames=None):
    """Render ``scene`` into the recorded-scene directory layout."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    frames = render_all(scene) if frames is None else frames
    audio = synthesize_audio(scene) if audio is None else audio
    for fr in frames:
        Image.fromarray(np.round(fr.pixels * 255).astype(np.uint8)).save(
            directory / "frames" / f"{fr.index:06d}.png")
    peak = float(np.max(np.abs(audio.samples))) if audio.samples.size else 0.0
    gain = 0.99 / peak if peak > 0 else 1.0
    pcm = np.round(audio.samples.T.astype(np.float64) * gain * 32767).astype("<i2")
    wavfile.write(directory / "audio.wav", audio.sample_rate_hz, pcm)
    meta = {
        "fps": scene.camera.fps,
        "sample_rate_hz": audio.sample_rate_hz,
        "frames": [{"id": fr.index, "timestamp_s": fr.timestamp_s} for fr in frames],
        "camera": asdict(scene.camera),
        "mics": asdict(scene.mics),
        "camera_height_m": scene.camera_height_m,
        "audio_gain": gain,
        "seed": scene.seed,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    ann = [{"frame": fr.index, "boxes": _box_list(fr.gt_boxes or [])} for fr in frames]
    (directory / "annotations.json").write_text(json.dumps(ann, indent=1))
    return directory


def _read_json(path):
    if not path.is_file():
        raise LoadError(LoadError.MISSING_FILE, f"missing {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(LoadError.MALFORMED_JSON, f"{path}: {exc}") from exc


def load_recorded_scene(path, load_pixels=True) -> RecordedScene:
    path = Path(path)
    meta = _read_json(path / "meta.json")
    wav_path = path / "audio.wav"
    if not wav_path.is_file():
        raise LoadError(LoadError.MISSING_FILE, f"missing {wav_path}")
    frame_dir = path / "frames"
    if not frame_dir.is_dir():
        raise LoadError(LoadError.MISSING_FILE, f"missing {frame_dir}")
    try:
        fps = float(meta["fps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(LoadError.MALFORMED_JSON, "meta.json lacks a numeric 'fps'") from exc

    rate, data = wavfile.read(wav_path)
    if "sample_rate_hz" in meta and int(meta["sample_rate_hz"]) != rate:
        raise LoadError(LoadError.SAMPLE_RATE_MISMATCH,
                        f"meta.json says {meta['sample_rate_hz']} Hz, WAV header says {rate} Hz")
    data = np.atleast_2d(data.T if data.ndim == 2 else data[None, :])
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    data = data / float(meta.get("audio_gain", 1.0))
    audio = AudioClip(samples=data.astype(np.float32), sample_rate_hz=int(rate))

    files = sorted(frame_dir.glob("*.png"))
    ids = [int(f.stem) for f in files]
    if "frames" in meta:
        stamps = {int(e["id"]): float(e["timestamp_s"]) for e in meta["frames"]}
    elif "timestamps" in meta:
        stamps = dict(zip(ids, map(float, meta["timestamps"])))
    else:
        stamps = {i: i / fps for i in ids}
    missing = [i for i in ids if i not in stamps]
    if missing:
        raise LoadError(LoadError.BAD_LAYOUT, f"no timestamp for frame id {missing[0]}")

    annotations = {}
    ann_path = path / "annotations.json"
    if ann_path.exists():
        raw = _read_json(ann_path)
        if not isinstance(raw, list):
            raise LoadError(LoadError.MALFORMED_JSON, "annotations.json must be a list")
        known = set(ids)
        for entry in raw:
            try:
                fid = int(entry["frame"])
                boxes = [BBox(*map(float, b[:4])) for b in entry["boxes"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise LoadError(LoadError.MALFORMED_JSON, f"bad annotation entry {entry!r}") from exc
            if fid not in known:
                raise LoadError(LoadError.UNKNOWN_FRAME, f"annotation references unknown frame id {fid}")
            annotations[fid] = boxes

    frames = []
    for fid, fpath in zip(ids, files):
        pixels = None
        if load_pixels:
            pixels = np.asarray(Image.open(fpath).convert("RGB"), dtype=np.float32) / 255.0
        frames.append(Frame(timestamp_s=stamps[fid], pixels=pixels,
                            gt_boxes=annotations.get(fid), index=fid))
    frames.sort(key=lambda f: (f.timestamp_s, f.index))

    camera = CameraModel(**meta["camera"]) if "camera" in meta else None
    mics = MicArray(**meta["mics"]) if "mics" in meta else None
    return RecordedScene(frames=frames, audio=audio, fps=fps, camera=camera, mics=mics,
                         has_annotations=ann_path.exists(), meta=meta)


def load_frame_pixels(scene_dir, frame_id):
    p = Path(scene_dir) / "frames" / f"{int(frame_id):06d}.png"
    return np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0


def gt_presence(frames: Sequence[Frame]):
    """Per-frame vehicle visibility from ground-truth boxes."""
    return [bool(f.gt_boxes) for f in frames]
