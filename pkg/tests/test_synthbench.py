"""Synthetic dual-view benchmark: shift construction, determinism, scoring,
and the on-disk round trip."""

import numpy as np
import pytest

from bino import synthbench as sb


def test_preset_configs():
    easy = sb.preset_config("EASY_S1", seed=3)
    assert not easy.occlusion and not easy.photometric
    assert (easy.d_min, easy.d_max) == (2, 12)
    hard2 = sb.preset_config("HARD_S2")
    assert hard2.d_max == 24 and hard2.occlusion and hard2.photometric
    with pytest.raises(ValueError):
        sb.preset_config("IMPOSSIBLE_S9")
    with pytest.raises(ValueError):
        sb.BenchConfig(d_min=5, d_max=4)
    with pytest.raises(ValueError):
        sb.BenchConfig(d_max=200, width=160)


def test_shift_definition_on_easy():
    """right[:, :, u] == left[:, :, u + s] wherever u + s stays in frame."""
    cfg = sb.preset_config("EASY_S1", seed=0)
    for i in range(8):
        s = sb.make_sample(cfg, i)
        L, R = s.pair.left, s.pair.right
        w = L.shape[2]
        np.testing.assert_array_equal(R[:, :, :w - s.shift], L[:, :, s.shift:])
        assert cfg.d_min <= s.shift <= cfg.d_max


def test_gt_equals_shift_and_valid_rule():
    cfg = sb.preset_config("EASY_S1", seed=1)
    g = cfg.geometry
    s = sb.make_sample(cfg, 0)
    assert s.pair.gt_disp.shape == (g.h_p, g.w_p)
    assert (s.pair.gt_disp == s.shift).all()
    # a patch column is valid when its left edge still has a counterpart
    # in the right view: p * p_w - shift >= 0
    for p in range(g.w_p):
        assert s.pair.valid[0, p] == (p * g.p_w - s.shift >= 0)
    assert (s.pair.valid == s.pair.valid[0]).all()  # constant per column


def test_seed_index_determinism_out_of_order():
    cfg = sb.preset_config("HARD_S1", seed=5)
    a = sb.make_sample(cfg, 3)
    # generate other indices in between; index 3 must be unaffected
    sb.make_sample(cfg, 0)
    sb.make_sample(cfg, 7)
    b = sb.make_sample(cfg, 3)
    assert a.pair.left.tobytes() == b.pair.left.tobytes()
    assert a.pair.right.tobytes() == b.pair.right.tobytes()
    assert a.shift == b.shift
    c = sb.make_sample(sb.preset_config("HARD_S1", seed=6), 3)
    assert c.pair.left.tobytes() != a.pair.left.tobytes()


def test_hard_preset_perturbs_views_independently():
    easy = sb.make_sample(sb.preset_config("EASY_S1", seed=2), 0)
    hard = sb.make_sample(sb.preset_config("HARD_S1", seed=2), 0)
    # same underlying crop stream, so the nuisance must be the difference
    w = easy.pair.left.shape[2]
    sh = hard.shift
    assert not np.array_equal(hard.pair.right[:, :, :w - sh],
                              hard.pair.left[:, :, sh:])
    assert (hard.pair.gt_disp == hard.shift).all()


def test_hard_preset_right_view_is_polarity_inverted():
    """HARD samples anti-correlate with the raw shifted copy: matching on
    pixel statistics must fail while the geometry stays intact."""
    easy = sb.make_sample(sb.preset_config("EASY_S1", seed=3, occlusion=False), 0)
    hard_cfg = sb.preset_config("HARD_S1", seed=3, occlusion=False)
    hard = sb.make_sample(hard_cfg, 0)
    assert easy.shift == hard.shift  # same underlying crop stream
    flat_e = easy.pair.right.reshape(-1).astype(np.float64)
    flat_h = hard.pair.right.reshape(-1).astype(np.float64)
    corr = np.corrcoef(flat_e, flat_h)[0, 1]
    assert corr < -0.5  # inverted polarity despite the photometric jitter
    np.testing.assert_array_equal(hard.pair.gt_disp, easy.pair.gt_disp)


def test_texture_is_in_range_and_nonconstant():
    cfg = sb.preset_config("EASY_S1", seed=4)
    s = sb.make_sample(cfg, 0)
    L = s.pair.left
    assert L.dtype == np.float32
    assert L.min() >= 0.0 and L.max() <= 1.0
    assert L.std() > 0.05  # enough texture to match on


def test_score_matching_oracle():
    cfg = sb.preset_config("EASY_S1", seed=0, height=16, width=32)
    g = cfg.geometry
    s = sb.make_sample(cfg, 1)
    gt_tok = s.pair.gt_disp / g.p_w
    pred = gt_tok.copy()
    perfect = sb.score_matching(pred, s, g.p_w)
    assert perfect == {"pck0": 100.0, "pck1": 100.0, "pck2": 100.0, "epe_tokens": 0.0}
    # push the first valid cell off by 1.5 tokens and recompute by hand
    rr, cc = np.argwhere(s.pair.valid)[0]
    pred[rr, cc] += 1.5
    got = sb.score_matching(pred, s, g.p_w)
    n = int(s.pair.valid.sum())
    assert got["pck0"] == pytest.approx(100.0 * (n - 1) / n)
    assert got["pck1"] == pytest.approx(100.0 * (n - 1) / n)
    assert got["pck2"] == 100.0
    assert got["epe_tokens"] == pytest.approx(1.5 / n)
    # PCK is monotone in its threshold
    assert got["pck0"] <= got["pck1"] <= got["pck2"]


def test_score_matching_requires_valid_cells():
    cfg = sb.preset_config("EASY_S1", seed=0, height=16, width=32)
    s = sb.make_sample(cfg, 0)
    s.pair.valid[:] = False
    with pytest.raises(ValueError):
        sb.score_matching(np.zeros_like(s.pair.gt_disp), s, cfg.p_w)


def test_generate_and_dataset_round_trip(tmp_path):
    cfg = sb.preset_config("HARD_S1", seed=9, height=16, width=32)
    samples = sb.generate(cfg, 4)
    assert [s.index for s in samples] == [0, 1, 2, 3]
    root = str(tmp_path / "ds")
    sb.write_dataset(root, cfg, samples)
    cfg2, back = sb.load_dataset(root)
    assert cfg2 == cfg
    assert len(back) == 4
    for a, b in zip(samples, back):
        assert b.shift == a.shift
        np.testing.assert_array_equal(b.pair.valid, a.pair.valid)
        # gt is stored for valid cells only
        np.testing.assert_allclose(b.pair.gt_disp[b.pair.valid],
                                   a.pair.gt_disp[a.pair.valid], atol=1e-5)
        # PPM quantizes to 8 bits: round trip within half a level
        assert np.abs(b.pair.left - a.pair.left).max() <= 0.5 / 255 + 1e-7
        assert np.abs(b.pair.right - a.pair.right).max() <= 0.5 / 255 + 1e-7


def test_dataset_write_is_deterministic(tmp_path):
    cfg = sb.preset_config("EASY_S1", seed=11, height=16, width=32)
    r1, r2 = str(tmp_path / "a"), str(tmp_path / "b")
    sb.write_dataset(r1, cfg, sb.generate(cfg, 2))
    sb.write_dataset(r2, cfg, sb.generate(cfg, 2))
    import os
    for name in sorted(os.listdir(r1)):
        with open(os.path.join(r1, name), "rb") as f1, \
             open(os.path.join(r2, name), "rb") as f2:
            assert f1.read() == f2.read(), name


def test_source_manifest_crops(tmp_path):
    from bino.imageio import write_image
    rng = np.random.default_rng(0)
    img = rng.random((3, 64, 96)).astype(np.float32)
    write_image(str(tmp_path / "src.ppm"), img)
    (tmp_path / "list.txt").write_text("src.ppm\n")
    cfg = sb.preset_config("EASY_S1", seed=0, height=16, width=32,
                           source_manifest=str(tmp_path / "list.txt"))
    samples = sb.generate(cfg, 2)
    for s in samples:
        assert s.pair.left.shape == (3, 16, 32)
    small = sb.preset_config("EASY_S1", seed=0, height=128, width=32,
                             source_manifest=str(tmp_path / "list.txt"))
    with pytest.raises(ValueError):
        sb.generate(small, 1)
