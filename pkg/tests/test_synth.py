import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsrnet.metrics import landmarks_from_heatmaps, psnr
from fsrnet.synth import (AUGMENT_OPS, DIHEDRAL, CorpusConfig, DataError, FaceScene, augment, bicubic_resize,
                          build_corpus, canonical_scene, corpus_hash, degrade, dihedral, dihedral_inverse,
                          in_memory_corpus, load_corpus, make_sample, render_heatmaps, render_parsing,
                          render_scene, resize_weights, sample_scene, scene_seeds, to_grid)


@pytest.fixture(scope="module")
def sample():
    return make_sample(123, CorpusConfig(hr_size=32, scale_factor=4))


# ------------------------------------------------------------------ scenes


def test_canonical_landmarks_symmetric():
    scene = canonical_scene(64)
    lm = scene.landmarks(5)
    mid = scene.center[1]
    # eyes and mouth corners mirror each other; the nose tip sits on the axis
    for a, b in ((0, 1), (3, 4)):
        assert abs(lm[a, 0] - lm[b, 0]) < 1.0
        assert abs((lm[a, 1] + lm[b, 1]) / 2 - mid) < 1.0
    assert abs(lm[2, 1] - mid) < 1.0


def test_eye_mask_nonzero_and_disjoint_from_mouth():
    masks = render_parsing(canonical_scene(64), 32)
    eyes, mouth = masks[1], masks[3]
    assert eyes.sum() > 0 and mouth.sum() > 0
    assert not np.any((eyes > 0) & (mouth > 0))


def test_render_is_deterministic():
    a = render_scene(sample_scene(5, 32))
    b = render_scene(sample_scene(5, 32))
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_scene_out_of_frame_rejected():
    good = canonical_scene(32)
    with pytest.raises(DataError):
        FaceScene(**{**good.__dict__, "center": (2.0, 16.0)})


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_scene_landmarks_in_frame(seed):
    scene = sample_scene(seed, 32)
    lm = scene.landmarks(13)
    assert np.all(lm >= -0.5) and np.all(lm <= 31.5)


@pytest.mark.parametrize("mode", ["global", "local"])
def test_parsing_partition(mode):
    masks = render_parsing(sample_scene(9, 32), 16, mode)
    assert set(np.unique(masks)) <= {0.0, 1.0}
    np.testing.assert_array_equal(masks.sum(axis=0), 1.0)
    fg = masks[:-1]
    assert np.all(fg.sum(axis=0) <= 1)


# --------------------------------------------------------------- heatmaps


def test_heatmap_peak_and_sigma_value():
    heat, flags = render_heatmaps(np.array([[10.0, 12.0]]), 32, sigma=2.0)
    assert not flags.any()
    assert heat[0, 10, 12] == 1.0
    assert heat[0].max() == 1.0
    assert heat[0, 12, 12] == pytest.approx(np.exp(-0.5), abs=1e-12)


def test_heatmap_channels_independent():
    both, _ = render_heatmaps(np.array([[3.0, 3.0], [28.0, 28.0]]), 32, sigma=2.0)
    alone, _ = render_heatmaps(np.array([[3.0, 3.0]]), 32, sigma=2.0)
    assert np.array_equal(both[0], alone[0])


def test_heatmap_out_of_frame_flagged():
    heat, flags = render_heatmaps(np.array([[40.0, 3.0], [1.0, 1.0]]), 32, sigma=1.0)
    assert flags.tolist() == [True, False]
    assert not heat[0].any()


def test_sample_heatmap_argmax_matches_landmarks(sample):
    ref = np.floor(to_grid(sample.landmarks, 2) + 0.5)
    for k, ch in enumerate(sample.heatmaps):
        assert np.unravel_index(np.argmax(ch), ch.shape) == tuple(ref[k].astype(int))


def test_sample_value_range(sample):
    for arr in (sample.hr, sample.lr_bicubic, sample.heatmaps, sample.parsing):
        assert arr.min() >= 0 and arr.max() <= 1


# -------------------------------------------------------------- resampling


@pytest.mark.parametrize("n_in,n_out", [(64, 8), (8, 64), (32, 4), (4, 32), (17, 9), (9, 17)])
def test_resize_weights_partition_of_unity(n_in, n_out):
    np.testing.assert_allclose(resize_weights(n_in, n_out).sum(axis=1), 1.0, atol=1e-6)


def test_bicubic_constant_preserved():
    img = np.full((3, 32, 32), 0.37)
    for size in (4, 8, 64):
        np.testing.assert_allclose(bicubic_resize(img, size), 0.37, atol=1e-12)


def test_bicubic_identity_size_bit_exact():
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    assert bicubic_resize(img, 16).tobytes() == img.tobytes()


def test_bicubic_smooth_gradient_roundtrip():
    ramp = np.linspace(0, 1, 64)
    img = (ramp[:, None] * 0.5 + ramp[None, :] * 0.5)[None]
    back = bicubic_resize(bicubic_resize(img, 8), 64)
    assert np.max(np.abs(back - img)) < 0.05


def test_bicubic_rejects_tiny():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((3, 8, 8)), 2)


def test_degrade_shapes_and_constant():
    img = np.full((3, 64, 64), 0.5)
    out = degrade(img, 8)
    assert out.shape == (3, 64, 64)
    np.testing.assert_allclose(out, 0.5, atol=1e-12)
    with pytest.raises(ValueError):
        degrade(np.zeros((3, 60, 60)), 8)


def test_degrade_psnr_band():
    # measured on this corpus: 19.8 to 25.4 dB for hr 64, scale 8
    corpus = in_memory_corpus(8, 1, 7)
    for s in corpus.train:
        assert 10.0 < psnr(s.lr_bicubic, s.hr) < 40.0


# ------------------------------------------------------------ augmentation


def test_rot90_four_times_identity(sample):
    s = sample
    for _ in range(4):
        s = augment(s, "rot90")
    for name in ("hr", "lr_bicubic", "heatmaps", "parsing", "landmarks"):
        assert getattr(s, name).tobytes() == getattr(sample, name).tobytes()


def test_hflip_twice_identity(sample):
    s = augment(augment(sample, "hflip"), "hflip")
    assert s.hr.tobytes() == sample.hr.tobytes()
    assert np.array_equal(s.landmarks, sample.landmarks)


def test_augment_rejects_unknown(sample):
    with pytest.raises(ValueError):
        augment(sample, "rot45")


def test_eight_distinct_dihedral_elements():
    img = np.arange(16.0).reshape(1, 4, 4)
    outs = {dihedral(img, k, f).tobytes() for k, f in DIHEDRAL}
    assert len(outs) == 8


@settings(max_examples=20, deadline=None)
@given(k=st.integers(0, 3), flip=st.booleans(), seed=st.integers(0, 1000))
def test_dihedral_inverse_bit_exact(k, flip, seed):
    x = np.random.default_rng(seed).uniform(size=(2, 6, 6))
    assert dihedral_inverse(dihedral(x, k, flip), k, flip).tobytes() == x.tobytes()


@pytest.mark.parametrize("op", sorted(AUGMENT_OPS))
def test_transformed_heatmap_argmax_tracks_landmarks(sample, op):
    s = augment(sample, op)
    ref = np.floor(to_grid(s.landmarks, 2) + 0.5).astype(int)
    got, flags = landmarks_from_heatmaps(s.heatmaps)
    assert not flags.any()
    assert np.array_equal(np.floor(got + 0.5).astype(int), ref)


# ------------------------------------------------------------------ corpus


def test_corpus_config_rejects():
    with pytest.raises(DataError):
        CorpusConfig(hr_size=60, scale_factor=8)
    with pytest.raises(DataError):
        CorpusConfig(hr_size=16, scale_factor=8)


def test_build_corpus_deterministic_and_manifest(tmp_path):
    cfg = CorpusConfig(hr_size=32, scale_factor=8)
    a = build_corpus(tmp_path / "a", 3, 2, seed=4, cfg=cfg)
    b = build_corpus(tmp_path / "b", 3, 2, seed=4, cfg=cfg, threads=3)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    entries = [json.loads(line) for line in (a / "manifest.jsonl").read_text().splitlines()]
    assert len(entries) == 5
    assert {"id", "seed", "files", "split"} <= set(entries[0])
    train = {e["seed"] for e in entries if e["split"] == "train"}
    test = {e["seed"] for e in entries if e["split"] == "test"}
    assert len(train) == 3 and len(test) == 2 and not train & test
    assert corpus_hash(a) == corpus_hash(b)


def test_build_corpus_collision(tmp_path):
    cfg = CorpusConfig(hr_size=32, scale_factor=8)
    build_corpus(tmp_path / "c", 1, 1, seed=0, cfg=cfg)
    with pytest.raises(DataError):
        build_corpus(tmp_path / "c", 1, 1, seed=0, cfg=cfg)
    build_corpus(tmp_path / "c", 2, 1, seed=0, cfg=cfg, overwrite=True)
    assert len(load_corpus(tmp_path / "c").train) == 2


def test_load_matches_in_memory(tmp_path):
    cfg = CorpusConfig(hr_size=32, scale_factor=4)
    disk = load_corpus(build_corpus(tmp_path / "d", 2, 1, seed=3, cfg=cfg))
    mem = in_memory_corpus(2, 1, 3, cfg)
    for a, b in zip(disk.train + disk.test, mem.train + mem.test):
        assert a.id == b.id
        for name in ("hr", "lr_bicubic", "heatmaps", "parsing", "landmarks"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_load_missing_corpus(tmp_path):
    with pytest.raises(DataError):
        load_corpus(tmp_path)


def test_scene_seeds_distinct():
    seeds = scene_seeds(0, 576)
    assert len(set(seeds)) == 576
    assert seeds == scene_seeds(0, 576)
