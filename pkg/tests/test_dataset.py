import json
import math

import numpy as np
import pytest
from scipy.io import wavfile

from avdet.audio import volume_series
from avdet.dataset import (MIC_BELOW_CAMERA_M, SOURCE_HEIGHT_M, AudioClip, CameraModel, LaneSpec, MicArray,
                           SceneConfig, TrafficSpec, VehicleTrack, closest_approach_time, generate_scene,
                           gt_presence, load_recorded_scene, render_all, render_frame, synthesize_audio,
                           write_scene)
from avdet.exceptions import ConfigError, LoadError, RangeError

FS = 44100


def _scene(tracks, duration=10.0, **kw):
    return generate_scene(SceneConfig(duration_s=duration, tracks=tracks, **kw), 0)


def _static(x, y, t_end=2.0, **kw):
    return VehicleTrack(times=[0.0, t_end], positions=[(x, y), (x, y)], **kw)


def _lag(a, b, max_lag=40):
    """Integer lag of b relative to a maximising the cross-correlation."""
    a = a - a.mean()
    b = b - b.mean()
    n = len(a)
    lags = range(-max_lag, max_lag + 1)
    scores = [np.dot(a[max_lag:n - max_lag], b[max_lag + k:n - max_lag + k]) for k in lags]
    return list(lags)[int(np.argmax(scores))]


def test_empty_scene():
    s = _scene([], duration=4.0)
    assert all(f.gt_boxes == [] for f in render_all(s))
    a = synthesize_audio(s)
    assert a.n_channels == 7 and a.samples.shape[1] == 4 * FS
    assert np.std(a.samples) == pytest.approx(s.ambient_level, rel=0.02)
    silent = synthesize_audio(_scene([], duration=1.0, ambient_level=0.0))
    assert not np.any(silent.samples)


def test_determinism():
    cfg = SceneConfig(duration_s=8.0)
    a, b = generate_scene(cfg, 3), generate_scene(cfg, 3)
    fa, fb = render_all(a), render_all(b)
    assert all(np.array_equal(x.pixels, y.pixels) and x.gt_boxes == y.gt_boxes for x, y in zip(fa, fb))
    assert np.array_equal(synthesize_audio(a).samples, synthesize_audio(b).samples)
    c = generate_scene(cfg, 4)
    assert not np.array_equal(render_all(c)[0].pixels, fa[0].pixels)


def test_frame_invariants():
    s = generate_scene(SceneConfig(duration_s=20.0, jitter_px=3), 1)
    W, H = s.camera.image_width, s.camera.image_height
    for f in render_all(s):
        assert f.pixels.shape == (H, W, 3)
        assert f.pixels.min() >= 0 and f.pixels.max() <= 1
        for b in f.gt_boxes:
            assert 0 <= b.x_min < b.x_max <= W and 0 <= b.y_min < b.y_max <= H


def test_render_before_entry_and_range():
    s = _scene([VehicleTrack(times=[5.0, 9.0], positions=[(-30.0, 8.0), (30.0, 8.0)])])
    assert render_frame(s, 1.0).gt_boxes == []
    with pytest.raises(RangeError):
        render_frame(s, -0.1)
    with pytest.raises(RangeError):
        render_frame(s, s.duration_s + 1)


def test_vehicle_on_axis_is_centred():
    s = _scene([_static(0.0, 10.0)])
    (b,) = render_frame(s, 1.0).gt_boxes
    assert abs(0.5 * (b.x_min + b.x_max) - s.camera.image_width / 2) <= 1.0


def test_vehicle_half_outside_is_clipped():
    cam = CameraModel()
    y = 10.0
    w, h = 4.0, 1.6
    # left edge of the frustum at depth y
    x_edge = -y * math.tan(math.radians(cam.horizontal_fov_deg) / 2)
    s = _scene([_static(x_edge, y, size=(w, h))])
    (b,) = render_frame(s, 1.0).gt_boxes
    f = cam.focal_px
    u1 = cam.image_width / 2 + f * (x_edge + w / 2) / y
    v0 = cam.image_height / 2 - f * (h - s.camera_height_m) / y
    v1 = cam.image_height / 2 + f * s.camera_height_m / y
    assert b.x_min == 0.0
    assert b.x_max == pytest.approx(u1)
    assert b.y_min == pytest.approx(v0) and b.y_max == pytest.approx(v1)


def test_tdoa_equidistant_and_axial():
    # mics 0 and 3 sit at angles 0 and 180 degrees, 2 * radius apart on the x axis
    mics = MicArray()
    s = _scene([_static(0.0, 30.0)], duration=2.0, ambient_level=0.0, mics=mics)
    a = synthesize_audio(s).samples.astype(np.float64)
    assert _lag(a[0, 10000:60000], a[3, 10000:60000]) == 0

    x = 80.0
    s = _scene([_static(x, 0.0)], duration=2.0, ambient_level=0.0, mics=mics)
    a = synthesize_audio(s).samples.astype(np.float64)
    pos = s.mic_positions
    src = np.array([x, 0.0, SOURCE_HEIGHT_M])
    d = np.linalg.norm(src - pos[3]) - np.linalg.norm(src - pos[0])
    expected = round(d / 343.0 * FS)
    assert expected == round(2 * mics.radius_m / 343.0 * FS)
    # mic 3 is further away, so its signal lags mic 0
    assert abs(_lag(a[0, 10000:60000], a[3, 10000:60000]) - expected) <= 1


def test_mic_geometry():
    s = _scene([], duration=1.0)
    pos = s.mic_positions
    assert pos.shape == (7, 3)
    assert np.allclose(pos[-1], [0, 0, s.camera_height_m - MIC_BELOW_CAMERA_M])
    assert np.allclose(np.hypot(pos[:6, 0], pos[:6, 1]), 0.05)


def test_volume_peak_matches_amplitude_law():
    track = VehicleTrack(times=[0.0, 12.0], positions=[(-60.0, 3.0), (60.0, 3.0)])
    s = _scene([track], duration=12.0, ambient_level=0.0)
    v = volume_series(synthesize_audio(s), s.frame_times)
    # analytic channel-averaged amplitude: source_level / max(distance, 1 m) at each frame time
    mics = s.mic_positions
    amp = []
    for t in s.frame_times:
        x, y = track.position(t)
        d = np.sqrt((x - mics[:, 0]) ** 2 + (y - mics[:, 1]) ** 2 + (SOURCE_HEIGHT_M - mics[:, 2]) ** 2)
        amp.append(np.mean(1.0 / np.maximum(d, 1.0)))
    assert abs(int(np.argmax(v.values)) - int(np.argmax(amp))) <= 1
    assert abs(int(np.argmax(v.values)) - closest_approach_time(track) * s.camera.fps) <= 1


def test_closest_approach_time():
    tr = VehicleTrack(times=[0, 10, 20], positions=[(-10, 5), (0, 5), (0, 50)])
    assert closest_approach_time(tr) == pytest.approx(10.0)
    tr = VehicleTrack(times=[0, 4], positions=[(-2, 1), (6, 1)])
    assert closest_approach_time(tr) == pytest.approx(1.0)


def test_offfrustum_sources_emit_sound():
    lanes = [LaneSpec(-12.0, 6.0)]
    s = generate_scene(SceneConfig(duration_s=30.0, traffic=TrafficSpec(lanes=lanes), ambient_level=0.0), 2)
    assert s.tracks
    assert not any(gt_presence(render_all(s)))
    assert np.max(np.abs(synthesize_audio(s).samples)) > 0.01


def test_every_crossing_vehicle_is_annotated():
    s = generate_scene(SceneConfig(duration_s=60.0), 5)
    frames = render_all(s)
    W = s.camera.image_width
    for tr in s.tracks:
        if tr.positions[0][1] <= 0:
            continue
        xs, ys = tr.position(s.frame_times)
        act = tr.active(s.frame_times)
        u = s.camera.focal_px * xs / ys + W / 2
        inside = act & (u > 0) & (u < W)
        if inside.any():
            k = int(np.flatnonzero(inside)[0])
            assert frames[k].gt_boxes


@pytest.mark.parametrize("bad, field", [
    ({"duration_s": 0}, "duration_s"),
    ({"mics": {"n_mics": 3}}, "mics.n_mics"),
    ({"mics": {"angles_deg": [0, 120, 60, 180, 240, 300]}}, "mics.angles_deg"),
    ({"camera": {"fps": 0}}, "camera.fps"),
    ({"tracks": [{"times": [1, 0], "positions": [[0, 5], [1, 5]]}]}, "track.path"),
    ({"tracks": [{"times": [0, 1], "positions": [[0, 5], [1, 5]], "size": [0, 1]}]}, "track.size"),
    ({"tracks": [{"times": [0, 1], "positions": [[0, 5], [1, 5]], "emitter": {"base_freq_hz": 0}}]},
     "emitter.base_freq_hz"),
    ({"bogus": 1}, "bogus"),
])
def test_config_validation_names_field(bad, field):
    with pytest.raises(ConfigError) as e:
        SceneConfig.from_dict(bad)
    assert e.value.field == field


def test_round_trip(tmp_path):
    s = generate_scene(SceneConfig(duration_s=6.0), 7)
    frames = render_all(s)
    clip = synthesize_audio(s)
    write_scene(s, tmp_path / "scene", clip, frames)
    rec = load_recorded_scene(tmp_path / "scene")
    assert rec.timestamps == [f.timestamp_s for f in frames]
    assert [f.gt_boxes for f in rec.frames] == [f.gt_boxes for f in frames]
    assert rec.audio.n_channels == 7
    # PCM16 quantisation only
    assert np.max(np.abs(rec.audio.samples - clip.samples)) < 2e-4 * np.max(np.abs(clip.samples)) + 1e-6
    assert np.max(np.abs(rec.frames[3].pixels - frames[3].pixels)) <= 0.5 / 255 + 1e-6


def _manual_scene(root, n_frames=5, channels=2, rate=FS, meta_rate=None, ann=None):
    (root / "frames").mkdir(parents=True)
    from PIL import Image
    for i in range(n_frames):
        Image.fromarray(np.full((4, 6, 3), 10 * i, dtype=np.uint8)).save(root / "frames" / f"{i:06d}.png")
    wavfile.write(root / "audio.wav", rate, np.zeros((rate // 10, channels), dtype=np.int16))
    meta = {"fps": 5.0}
    if meta_rate is not None:
        meta["sample_rate_hz"] = meta_rate
    (root / "meta.json").write_text(json.dumps(meta))
    if ann is not None:
        (root / "annotations.json").write_text(json.dumps(ann))
    return root


def test_load_manual_layout(tmp_path):
    rec = load_recorded_scene(_manual_scene(tmp_path / "s"))
    assert len(rec.frames) == 5 and rec.audio.n_channels == 2
    assert rec.timestamps == [0.0, 0.2, 0.4, 0.6, 0.8]
    assert not rec.has_annotations and rec.frames[0].gt_boxes is None


def test_load_errors(tmp_path):
    with pytest.raises(LoadError) as e:
        load_recorded_scene(tmp_path / "missing")
    assert e.value.code == LoadError.MISSING_FILE

    root = _manual_scene(tmp_path / "a", ann=[{"frame": 17, "boxes": []}])
    with pytest.raises(LoadError) as e:
        load_recorded_scene(root)
    assert e.value.code == LoadError.UNKNOWN_FRAME and "17" in str(e.value)

    root = _manual_scene(tmp_path / "b", meta_rate=48000)
    with pytest.raises(LoadError) as e:
        load_recorded_scene(root)
    assert e.value.code == LoadError.SAMPLE_RATE_MISMATCH

    root = _manual_scene(tmp_path / "c")
    (root / "meta.json").write_text("{not json")
    with pytest.raises(LoadError) as e:
        load_recorded_scene(root)
    assert e.value.code == LoadError.MALFORMED_JSON


def test_audio_clip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.array([[0.0, np.nan]]))
    assert AudioClip(np.zeros(10)).n_channels == 1
