"""Stereo probe: cost volume, SGM vs brute force, refinement, LR check,
metrics, and retrieval."""

import math

import numpy as np
import pytest

from bino import stereo as st
from bino import synthbench as sb
from bino.fusion import ImagePair, TokenGridGeometry
from bino.kernels import sgm_py, _sgm_cy, BACKEND
from helpers import random_pair, tiny_encoder


# ---------------------------------------------------------------------------
# brute-force SGM oracle


def _brute_path_cost(cost_line, p1, p2):
    """Exact directional aggregation by recursion over all disparities,
    scalar float32 arithmetic in the kernel's operation order."""
    steps, nd = cost_line.shape
    prev = cost_line[0].astype(np.float32).copy()
    out = [prev.copy()]
    for s in range(1, steps):
        best = np.float32(min(prev))
        new = np.empty(nd, np.float32)
        for d in range(nd):
            c = prev[d]
            if d > 0:
                c = min(c, np.float32(prev[d - 1] + np.float32(p1)))
            if d < nd - 1:
                c = min(c, np.float32(prev[d + 1] + np.float32(p1)))
            c = min(c, np.float32(best + np.float32(p2)))
            new[d] = np.float32(np.float32(cost_line[s, d] + c) - best)
        prev = new
        out.append(prev.copy())
    return np.stack(out)


def _brute_aggregate(cost, p1, p2):
    h, w, nd = cost.shape
    agg = np.zeros_like(cost, dtype=np.float32)
    for r in range(h):
        agg[r] += _brute_path_cost(cost[r], p1, p2)
        agg[r] += _brute_path_cost(cost[r, ::-1], p1, p2)[::-1]
    for c in range(w):
        agg[:, c] += _brute_path_cost(cost[:, c], p1, p2)
        agg[:, c] += _brute_path_cost(cost[::-1, c], p1, p2)[::-1]
    return agg


def test_sgm_hand_case_1x3x2():
    # single row, 3 columns, 2 disparities; work the recursion by hand
    cost = np.array([[[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]], dtype=np.float32)
    p1, p2 = 0.25, 0.75
    agg, disp = st.sgm(cost, p1, p2)
    # left-to-right pass: L0=(0,1); L1=(1+min(0,1+.25,0+.75),0+min(1,0+.25,0+.75))-0=(1, .25)
    # L2=(0+min(.25... wait prev=(1,.25)): best=.25;
    #    d0: min(1, .25+.25, .25+.75)=.5 -> 0+.5-.25=.25
    #    d1: min(.25, 1+.25, .25+.75)=.25 -> 1+.25-.25=1
    lr = sgm_py._scan(cost, np.float32(p1), np.float32(p2))
    np.testing.assert_allclose(lr[0], [[0, 1], [1, 0.25], [0.25, 1]], atol=1e-7)
    np.testing.assert_array_equal(agg, _brute_aggregate(cost, p1, p2))
    assert disp.tolist() == [[0, 1, 0]]


@pytest.mark.parametrize("seed", range(10))
def test_sgm_matches_brute_force_exactly(seed):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(1, 7))
    w = int(rng.integers(1, 9))
    nd = int(rng.integers(1, 7))
    cost = rng.random((h, w, nd)).astype(np.float32)
    p1 = float(rng.uniform(0, 0.5))
    p2 = p1 + float(rng.uniform(0, 1.0))
    agg, _ = st.sgm(cost, p1, p2)
    assert agg.tobytes() == _brute_aggregate(cost, p1, p2).tobytes()


def test_sgm_with_invalid_entries_matches_brute_force():
    rng = np.random.default_rng(99)
    cost = rng.random((4, 6, 5)).astype(np.float32)
    cost[:, :2, 3:] = st.INVALID  # inf band like a real cost volume border
    agg, disp = st.sgm(cost, 0.1, 0.8)
    finite = np.isfinite(agg)
    brute = _brute_aggregate(cost, 0.1, 0.8)
    assert np.array_equal(finite, np.isfinite(brute))
    assert agg[finite].tobytes() == brute[finite].tobytes()
    assert np.isfinite(agg[0, 0, :3]).all()  # valid entries stay finite


def test_sgm_zero_penalties_equal_wta():
    rng = np.random.default_rng(3)
    cost = rng.random((5, 7, 6)).astype(np.float32)
    _, disp = st.sgm(cost, 0.0, 0.0)
    np.testing.assert_array_equal(disp, st.wta(cost))


def test_sgm_rejects_bad_penalties():
    cost = np.zeros((1, 1, 2), np.float32)
    with pytest.raises(ValueError):
        st.sgm(cost, 0.5, 0.2)
    with pytest.raises(ValueError):
        st.sgm(cost, -0.1, 0.2)


@pytest.mark.skipif(_sgm_cy is None, reason="compiled kernel not built")
def test_python_and_cython_backends_bit_identical():
    rng = np.random.default_rng(7)
    for _ in range(20):
        cost = rng.random((6, 10, 8)).astype(np.float32)
        cost[rng.random(cost.shape) < 0.1] = st.INVALID
        a = sgm_py.aggregate(cost, 0.1, 0.8)
        b = _sgm_cy.aggregate(cost, 0.1, 0.8)
        fin = np.isfinite(a)
        assert np.array_equal(fin, np.isfinite(b))
        assert a[fin].tobytes() == b[fin].tobytes()


def test_backend_selection_reports():
    assert BACKEND in ("python", "cython")


# ---------------------------------------------------------------------------
# cost volume


def _unit_desc(rng, h, w, d):
    x = rng.normal(0, 1, (h, w, d)).astype(np.float32)
    return st.DescriptorMap(desc=st.l2_normalize(x))


def test_cost_volume_scalar_oracle_and_inf_placement():
    rng = np.random.default_rng(0)
    dl = _unit_desc(rng, 3, 6, 8)
    dr = _unit_desc(rng, 3, 6, 8)
    vol = st.build_cost_volume(dl, dr, d_max=4, direction="left")
    assert vol.cost.shape == (3, 6, 4)
    for r in range(3):
        for p in range(6):
            for d in range(4):
                if p - d < 0:
                    assert vol.cost[r, p, d] == st.INVALID
                else:
                    sim = float(np.dot(dl.desc[r, p].astype(np.float64),
                                       dr.desc[r, p - d].astype(np.float64)))
                    assert vol.cost[r, p, d] == pytest.approx(1.0 - sim, abs=1e-6)
    vol_r = st.build_cost_volume(dr, dl, d_max=4, direction="right")
    for r in range(3):
        for p in range(6):
            for d in range(4):
                if p + d >= 6:
                    assert vol_r.cost[r, p, d] == st.INVALID
                else:
                    sim = float(np.dot(dr.desc[r, p].astype(np.float64),
                                       dl.desc[r, p + d].astype(np.float64)))
                    assert vol_r.cost[r, p, d] == pytest.approx(1.0 - sim, abs=1e-6)


def test_cost_volume_validation():
    rng = np.random.default_rng(1)
    dl = _unit_desc(rng, 2, 4, 8)
    dr = _unit_desc(rng, 2, 5, 8)
    with pytest.raises(ValueError):
        st.build_cost_volume(dl, dl, d_max=5)  # d_max > token columns
    with pytest.raises(ValueError):
        st.build_cost_volume(dl, dr, d_max=2)  # shape mismatch
    with pytest.raises(ValueError):
        st.build_cost_volume(dl, dl, d_max=2, direction="up")


def test_wta_tie_breaks_to_smaller_disparity():
    cost = np.zeros((1, 1, 4), np.float32)
    assert st.wta(cost)[0, 0] == 0


# ---------------------------------------------------------------------------
# refinement and LR check


def test_soft_refine_symmetric_well_is_exact_at_center():
    # symmetric parabola around d=2: expectation equals the argmin
    agg = np.array([[[4.0, 1.0, 0.0, 1.0, 4.0]]], dtype=np.float32)
    disp = st.wta(agg)
    ref = st.soft_refine(agg, disp, window=2)
    assert ref[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_soft_refine_skewed_well_moves_toward_lower_cost():
    agg = np.array([[[4.0, 1.0, 0.0, 0.2, 4.0]]], dtype=np.float32)
    disp = st.wta(agg)
    ref = st.soft_refine(agg, disp, window=2)
    assert 2.0 < ref[0, 0] <= 2.5


def test_soft_refine_clips_to_half_token():
    # extreme skew: the raw expectation would exceed +-0.5
    agg = np.array([[[0.0, 0.001, 0.002, 10.0, 10.0]]], dtype=np.float32)
    disp = st.wta(agg)
    ref = st.soft_refine(agg, disp, window=2, temperature=10.0)
    assert abs(ref[0, 0] - disp[0, 0]) <= 0.5 + 1e-12


def test_soft_refine_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    agg = rng.random((2, 3, 7)).astype(np.float32)
    disp = st.wta(agg)
    ref = st.soft_refine(agg, disp, window=2, temperature=1.0)
    for r in range(2):
        for p in range(3):
            d0 = int(disp[r, p])
            num = den = 0.0
            for off in range(-2, 3):
                d = d0 + off
                if 0 <= d < 7:
                    wgt = math.exp(-float(agg[r, p, d]))
                    num += wgt * d
                    den += wgt
            expect = min(max(num / den, d0 - 0.5), d0 + 0.5)
            assert ref[r, p] == pytest.approx(expect, abs=1e-9)


def test_soft_refine_window_validation():
    agg = np.zeros((1, 1, 3), np.float32)
    with pytest.raises(ValueError):
        st.soft_refine(agg, np.zeros((1, 1), np.int64), window=0)
    with pytest.raises(ValueError):
        st.soft_refine(agg, np.zeros((1, 1), np.int64), window=2)


def test_lr_check_hand_case():
    # row of 4: disp_l says column 2 maps to column 0
    disp_l = np.array([[0.0, 0.0, 2.0, 3.0]])
    disp_r = np.array([[2.0, 0.0, 0.0, 0.0]])
    valid, keep = st.lr_check(disp_l, disp_r, tol=0.5)
    # p=0: back=disp_r[0]=2 -> |0-2|>tol invalid
    # p=1: back=disp_r[1]=0 -> valid
    # p=2: back=disp_r[0]=2 -> |2-2|<=tol valid
    # p=3: target=0, back=2 -> |3-2|>tol invalid
    assert valid.tolist() == [[False, True, True, False]]
    assert keep == pytest.approx(50.0)


def test_lr_check_out_of_grid_is_invalid():
    disp_l = np.array([[3.0]])
    disp_r = np.array([[3.0]])
    valid, keep = st.lr_check(disp_l, disp_r, tol=10.0)
    assert not valid[0, 0] and keep == 0.0


# ---------------------------------------------------------------------------
# metrics


def test_disparity_metrics_oracle():
    gt = np.array([[8.0, 40.0, 80.0]])
    pred_tok = np.array([[2.0, 10.5, 18.0]])  # px: 8, 42, 72 at token_px=4
    valid = np.ones_like(gt, bool)
    m = st.disparity_metrics(pred_tok, gt, valid, token_px=4.0)
    errs = np.array([0.0, 2.0, 8.0])
    assert m["epe_px"] == pytest.approx(errs.mean(), abs=1e-6)
    # token errors 0, 0.5, 2 -> one above 1 token
    assert m["bad1tok_pct"] == pytest.approx(100.0 / 3)
    # D1 threshold max(3, 0.05*gt) = 3, 3, 4 -> only the last err exceeds
    assert m["d1_pct"] == pytest.approx(100.0 / 3)
    with pytest.raises(ValueError):
        st.disparity_metrics(pred_tok, gt, np.zeros_like(valid), 4.0)


def test_bad1tok_is_complement_of_pck1():
    """Bad@1tok == 100 - PCK@1 on the same prediction and valid set."""
    cfg = sb.preset_config("EASY_S1", seed=0, height=16, width=64)
    s = sb.make_sample(cfg, 2)
    rng = np.random.default_rng(0)
    pred = (s.pair.gt_disp / cfg.p_w) + rng.normal(0, 1.2, s.pair.gt_disp.shape)
    m = st.disparity_metrics(pred, s.pair.gt_disp, s.pair.valid, float(cfg.p_w))
    pck = sb.score_matching(pred, s, cfg.p_w)
    assert m["bad1tok_pct"] == pytest.approx(100.0 - pck["pck1"], abs=1e-6)


def test_nn_row_match_signed_disparity():
    rng = np.random.default_rng(2)
    d_r = _unit_desc(rng, 2, 5, 8)
    # left = right shifted by 2 columns: left[p] == right[p-2]
    desc_l = np.roll(d_r.desc, 2, axis=1)
    d_l = st.DescriptorMap(desc=desc_l)
    match = st.nn_row_match(d_l, d_r)
    assert (match[:, 2:] == 2).all()


def test_pair_collapse_feature_layout():
    rng = np.random.default_rng(3)
    grid = rng.normal(0, 1, (2, 8, 4)).astype(np.float32)
    f = st.pair_collapse_feature(grid, 1, 2)
    a, b = grid[1, 4], grid[1, 5]
    np.testing.assert_array_equal(f, np.concatenate([a, b, np.abs(a - b), a * b]))


# ---------------------------------------------------------------------------
# retrieval


def test_retrieval_perfect_and_chance_cases():
    rng = np.random.default_rng(4)
    # identical left/right pooled descriptors: retrieval is perfect
    pairs = []
    for _ in range(6):
        d = _unit_desc(rng, 2, 4, 8)
        pairs.append((d, st.DescriptorMap(desc=d.desc.copy())))
    out = st.retrieval_eval(pairs, hard_subset_size=3, rng=np.random.default_rng(0))
    assert out["top1"] == 100.0 and out["hard1"] == 100.0
    assert out["margin"] > 0.0
    with pytest.raises(ValueError):
        st.retrieval_eval(pairs[:1], 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        st.retrieval_eval(pairs, 10, np.random.default_rng(0))


def test_retrieval_scalar_oracle_small_case():
    # hand-build pooled descriptors via constant maps
    def const_map(v):
        d = np.tile(np.asarray(v, np.float32), (1, 1, 1))
        return st.DescriptorMap(desc=d / np.linalg.norm(v))

    e1, e2, e3 = np.eye(3, dtype=np.float32)
    pairs = [(const_map(e1), const_map(e2)),   # positive sim 0
             (const_map(e2), const_map(e2)),   # positive sim 1
             (const_map(e3), const_map(e3))]   # positive sim 1
    out = st.retrieval_eval(pairs, hard_subset_size=2, rng=np.random.default_rng(1))
    # pair 0's best right is index 1 (sim 1 vs 0): rank 2; others rank 1
    assert out["top1"] == pytest.approx(100.0 * 2 / 3)
    assert out["top5"] == 100.0


# ---------------------------------------------------------------------------
# config retargeting and the end-to-end probe


def test_config_for_image_rules():
    cfg, _ = tiny_encoder(height=16, width=16)
    wide = st.config_for_image(cfg, 16, 32)
    assert wide.geometry.width == 32 and wide.geometry.height == 16
    assert st.config_for_image(cfg, 16, 16) is cfg
    with pytest.raises(ValueError):
        st.config_for_image(cfg, 32, 16)
    cfg_abs, _ = tiny_encoder(height=16, width=16, pos_variant="factorized-2d")
    with pytest.raises(ValueError):
        st.config_for_image(cfg_abs, 16, 32)


def test_export_descriptors_shape_and_norm():
    cfg, params = tiny_encoder(height=16, width=32)
    rng = np.random.default_rng(6)
    img = rng.random((3, 16, 32)).astype(np.float32)
    dm = st.export_descriptors(cfg, params, img)
    g = cfg.geometry
    assert dm.desc.shape == (g.h_p, g.w_p, cfg.dim)
    np.testing.assert_allclose(np.linalg.norm(dm.desc, axis=-1), 1.0, atol=1e-5)
    raw = st.export_descriptors(cfg, params, img, normalize=False)
    assert not np.allclose(np.linalg.norm(raw.desc, axis=-1), 1.0, atol=1e-3)


def test_probe_pair_end_to_end_keys_and_ranges():
    cfg, params = tiny_encoder(height=16, width=64)
    bench = sb.preset_config("EASY_S1", seed=0, height=16, width=64, d_max=8)
    sample = sb.make_sample(bench, 0)
    out = st.probe_pair(cfg, params, sample.pair, d_max=6, p1=0.1, p2=0.8, lr_tol=1.0)
    g = cfg.geometry
    assert out["wta"].shape == (g.h_p, g.w_p)
    assert out["refined"].shape == (g.h_p, g.w_p)
    assert np.abs(out["refined"] - st.wta(np.zeros((1, 1, 1)))).size  # refined exists
    assert (np.abs(out["refined"] - out["refined"].round()) <= 0.5).all()
    assert 0.0 <= out["lr_keep"] <= 100.0
    m = out["metrics"]
    for key in ("gt_wta_epe", "gt_sgmloc_epe", "gt_sgmloc_bad1tok",
                "gt_sgmloc_d1", "lr_keep"):
        assert key in m and math.isfinite(m[key])
