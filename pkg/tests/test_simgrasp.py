import dataclasses

import numpy as np
import pytest

from spectrograsp.errors import ParameterError
from spectrograsp.simgrasp import (
    CLASS_BY_NAME,
    FRUITS,
    MATERIAL_CLASSES,
    VISIBLE_EDGE_NM,
    EpisodeParams,
    GenConfig,
    Renderer,
    band_signals,
    build_dataset,
    gain_nir,
    gain_vis,
    generate_dataset,
    generate_episode,
    make_profiles,
    nir_crossover_distance,
    pair_partner,
    render_ambient_frame,
    render_frame,
)
from spectrograsp.spectra import FRAME_RATE_HZ, WavelengthGrid

GRID = WavelengthGrid.default()
VIS = GRID.values < VISIBLE_EDGE_NM


@pytest.fixture(scope="module")
def profiles():
    return make_profiles(42)


def test_material_classes():
    assert len(MATERIAL_CLASSES) == 32 and len(FRUITS) == 16
    assert [m.class_index for m in MATERIAL_CLASSES] == list(range(32))
    assert len({(m.fruit, m.authenticity) for m in MATERIAL_CLASSES}) == 32
    assert CLASS_BY_NAME["pear-fake"].pair_id == CLASS_BY_NAME["pear-real"].pair_id
    assert pair_partner("pear-fake") == "pear-real" and pair_partner("kiwi-real") == "kiwi-fake"


def test_pairs_share_visible_and_differ_in_nir(profiles):
    for a, b in zip(profiles[0::2], profiles[1::2]):
        assert a.pair_id == b.pair_id
        assert np.array_equal(a.visible_profile, b.visible_profile)
        assert np.all(a.visible_profile[~VIS] == 0) and np.all(a.nir_profile[VIS] == 0)
        rel = np.linalg.norm(a.nir_profile - b.nir_profile) / (
            0.5 * (np.linalg.norm(a.nir_profile) + np.linalg.norm(b.nir_profile)))
        assert rel >= 0.3


def test_profiles_are_seeded(profiles):
    again = make_profiles(42)
    assert all(np.array_equal(p.reflectance, q.reflectance) for p, q in zip(profiles, again))
    other = make_profiles(43)
    assert any(not np.array_equal(p.reflectance, q.reflectance) for p, q in zip(profiles, other))
    with pytest.raises(ParameterError):
        make_profiles(0, nir_shape_overlap=1.0)


def test_gain_laws():
    d = np.linspace(1.0, 8.5, 50)
    assert np.all(np.diff(gain_vis(d)) < 0) and np.all(np.diff(gain_nir(d)) < 0)
    assert np.all(np.diff(gain_nir(d) / gain_vis(d)) < 0)  # the NIR share grows as the fingers close
    assert gain_nir(3.0) == pytest.approx(gain_vis(3.0))


def test_nir_dominates_only_close_up(profiles):
    p = EpisodeParams()
    for prof in profiles:
        vis_far, nir_far = band_signals(prof, p.d_start, GRID)
        vis_near, nir_near = band_signals(prof, p.d_grasp, GRID)
        assert nir_far < vis_far and nir_near >= vis_near
        d_star = nir_crossover_distance(prof, GRID)
        assert p.d_grasp < d_star < p.d_start
        v, n = band_signals(prof, d_star, GRID)
        assert n == pytest.approx(v, rel=1e-9)


def test_noise_free_frames_are_pure(profiles):
    p = EpisodeParams()
    a = render_frame(profiles[3], 4.0, p)
    b = render_frame(profiles[3], 4.0, p)
    assert np.array_equal(a.counts, b.counts) and a.distance == 4.0
    r = Renderer()
    expected = r.dark + r.lamp * p.gel_attenuation * (
        r.ambient + gain_vis(4.0) * profiles[3].visible_profile + gain_nir(4.0) * profiles[3].nir_profile)
    assert np.allclose(a.counts, expected, rtol=1e-12)


def test_far_frame_is_mostly_ambient(profiles):
    p = EpisodeParams()
    r = Renderer()
    obj = r.signal(profiles[0], p.d_start, p) - r.signal(None, p.d_start, p)
    ambient = r.signal(None, p.d_start, p)
    assert ambient[VIS].sum() > 0.1 * obj[VIS].sum()


def test_render_rejects_out_of_range_distance(profiles):
    with pytest.raises(ParameterError):
        render_frame(profiles[0], 9.0, EpisodeParams())
    with pytest.raises(ParameterError):
        render_frame(profiles[0], 0.5, EpisodeParams())


def test_gel_scales_every_channel_exactly(profiles):
    on = Renderer().signal(profiles[5], 1.0, EpisodeParams(gel_attenuation=0.93))
    off = Renderer().signal(profiles[5], 1.0, EpisodeParams(gel_attenuation=1.0))
    assert np.allclose(on / off, 0.93, rtol=1e-13, atol=0)


def test_gel_ratio_uniform_within_noise(profiles):
    r = Renderer()
    n = 200
    stacks = {}
    for gel in (0.93, 1.0):
        p = EpisodeParams(gel_attenuation=gel)
        rng = np.random.default_rng(int(gel * 100))
        stacks[gel] = np.array([r.render(profiles[5], p.d_grasp, p, rng).counts for _ in range(n)]) - r.dark
    on, off = stacks[0.93].mean(0), stacks[1.0].mean(0)
    se_on = stacks[0.93].std(0, ddof=1) / np.sqrt(n)
    se_off = stacks[1.0].std(0, ddof=1) / np.sqrt(n)
    ratio = on / off
    sigma = ratio * np.sqrt((se_on / on) ** 2 + (se_off / off) ** 2)
    inside = np.abs(ratio - 0.93) <= 3 * sigma
    # a Gaussian puts 99.73% inside 3 sigma; allow sampling slack on 2048 channels
    assert inside.mean() >= 0.99
    w = 1 / sigma**2
    pooled = np.sum(w * ratio) / w.sum()
    assert abs(pooled - 0.93) <= 3 / np.sqrt(w.sum())


def test_realized_snr(profiles):
    p = EpisodeParams()
    r = Renderer()
    rng = np.random.default_rng(0)
    frames = np.array([r.render(profiles[9], p.d_grasp, p, rng).counts for _ in range(1000)]) - r.dark
    sigma = frames.std(axis=0, ddof=1)
    realized = np.mean(sigma) / frames.mean()
    assert abs(realized * p.snr - 1.0) <= 0.15


def test_ambient_frames_are_class_independent():
    p = EpisodeParams()
    a = render_ambient_frame(p, np.random.default_rng(5))
    b = render_ambient_frame(p, np.random.default_rng(5))
    assert np.array_equal(a.counts, b.counts) and a.distance is None
    r = Renderer()
    assert np.allclose(render_ambient_frame(p).counts, r.dark + r.lamp * p.gel_attenuation * r.ambient)
    # ambient light peaks in the visible band
    assert np.argmax(r.ambient) < np.argmax(VIS == False)  # noqa: E712


def test_episode_shape(profiles):
    p = EpisodeParams(seed=42)
    ep = generate_episode(MATERIAL_CLASSES[4], profiles, p, 0)
    assert len(ep.frames) == 65
    ts = np.array([f.timestamp for f in ep.frames])
    assert np.allclose(ts, np.arange(65) / FRAME_RATE_HZ, atol=1e-12)
    d = ep.distances
    assert d[0] == p.d_start and d[-1] == p.d_grasp
    assert np.all(np.diff(d) <= 0)
    g = ep.grasp_index
    assert g == 38 and np.all(d[g:] == p.d_grasp) and d[g - 1] > p.d_grasp
    assert ep.phase_marks["pre_grasp"] == 0 and ep.label.name == "green_grape-real"


def test_episode_determinism(profiles):
    p = EpisodeParams(seed=42)
    m = MATERIAL_CLASSES[7]
    a = generate_episode(m, profiles, p, 2)
    b = generate_episode(m, profiles, p, 2)
    assert all(np.array_equal(x.counts, y.counts) for x, y in zip(a.frames, b.frames))
    c = generate_episode(m, profiles, dataclasses.replace(p, seed=43), 2)
    d = generate_episode(m, profiles, p, 3)
    assert not np.array_equal(a.frames[0].counts, c.frames[0].counts)
    assert not np.array_equal(a.frames[0].counts, d.frames[0].counts)


def test_hold_phase_flex_is_small(profiles):
    p = EpisodeParams(seed=1, frame_drift=0.0, frame_nir_jitter=0.0, snr=1e12)
    ep = generate_episode(MATERIAL_CLASSES[0], profiles, p, 0)
    hold = np.array([f.counts for f in ep.frames[ep.grasp_index + 1:]]) - Renderer().dark
    ref = hold.mean(axis=0)
    scale = hold.sum(axis=1) / ref.sum()
    assert np.all(np.abs(scale - 1.0) <= 2 * p.flex_jitter + 1e-9)


def test_params_validation():
    for bad in ({"d_grasp": 9.0}, {"n_frames": 1}, {"snr": 0.0}, {"gel_attenuation": 0.0},
                {"gel_attenuation": 1.1}, {"d_grasp": -1.0, "d_start": 2.0}):
        with pytest.raises(ParameterError):
            EpisodeParams(**bad)


def test_dataset_scale_and_balance(tmp_path):
    ds = generate_dataset(1, seed=3, out_dir=tmp_path)
    assert len(set(ds.episode_ids.tolist())) == 32 and len(ds) == 32 * 65
    _, counts = np.unique(ds.labels, return_counts=True)
    assert np.all(counts == 65)
    for f in ("frames.csv", "grid.csv", "calibration.csv", "gen_config.json"):
        assert (tmp_path / f).is_file()


def test_default_dataset_size():
    cfg = GenConfig()
    assert cfg.episodes_per_class == 5 and cfg.seed == 42
    assert 32 * cfg.episodes_per_class * cfg.params.n_frames == 10400


def test_dataset_is_schedule_independent(monkeypatch):
    cfg = GenConfig(episodes_per_class=1, seed=9)
    monkeypatch.setenv("SPECTROGRASP_THREADS", "1")
    a = build_dataset(cfg)
    monkeypatch.setenv("SPECTROGRASP_THREADS", "4")
    b = build_dataset(cfg)
    assert np.array_equal(a.counts, b.counts)


def test_gen_config_round_trip():
    cfg = GenConfig(episodes_per_class=2, seed=8).with_params(snr=500.0)
    back = GenConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict() and back.params.snr == 500.0
    with pytest.raises(ParameterError):
        GenConfig.from_dict({"params": {"ambient_level": 1.0}})
