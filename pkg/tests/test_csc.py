import logging
import struct

import numpy as np
import pytest

from cogd.core import ShapeError, conv2d_circular_direct, correlate2d_circular_direct, make_rng
from cogd.csc import (HISTORY_HEADER, AdmmState, CodeMaps, FilterBank, code_image, code_update,
                      cogd_coordinate_codes, csc_cogd_config, history_csv, infer_codes, inpaint,
                      kernel_update, learn, objective, project_unit_ball, reconstruct,
                      soft_threshold)
from cogd.imaging import ImageGrid, make_subsample_mask, psnr


def planted(K=4, k=5, size=24, n=1, density=0.03, seed=0):
    rng = make_rng(seed, "planted-test")
    bank = FilterBank.random(K, k, seed + 100)
    codes = [CodeMaps(rng.standard_normal((K, size, size)) * (rng.random((K, size, size)) < density))
             for _ in range(n)]
    return bank, codes, [reconstruct(bank, c) for c in codes]


# proximal maps ---------------------------------------------------------------

def test_soft_threshold_examples():
    np.testing.assert_array_equal(soft_threshold([3.0, -0.5, 0.0], 1.0), [2.0, 0.0, 0.0])
    v = np.random.default_rng(0).standard_normal(7)
    np.testing.assert_array_equal(soft_threshold(v, 0.0), v)
    assert soft_threshold([0.999999], 1.0)[0] == 0.0
    with pytest.raises(ValueError):
        soft_threshold([1.0], -0.1)


def test_soft_threshold_nonexpansive():
    rng = np.random.default_rng(1)
    for _ in range(200):
        u, v, t = rng.standard_normal(10), rng.standard_normal(10), rng.uniform(0, 2)
        assert np.linalg.norm(soft_threshold(u, t) - soft_threshold(v, t)) <= np.linalg.norm(u - v)


def test_project_unit_ball_examples():
    v = np.full((2, 2), 0.25)  # norm 0.5
    np.testing.assert_array_equal(project_unit_ball(v), v)
    w = np.full((2, 2), 1.0)   # norm 2
    out = project_unit_ball(w)
    np.testing.assert_array_equal(out, w / 2.0)
    assert np.linalg.norm(out) == 1.0
    r = np.random.default_rng(2).standard_normal((5, 5))
    r *= 3.7 / np.linalg.norm(r)
    out = project_unit_ball(r)
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12
    np.testing.assert_allclose(out, r / 3.7, atol=1e-12)


def test_project_unit_ball_crops_support_and_is_idempotent():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((3, 8, 8)) * 2.0
    once = project_unit_ball(v, support=(3, 3))
    assert np.all(once[:, 3:, :] == 0.0) and np.all(once[:, :, 3:] == 0.0)
    assert np.all(np.sqrt(np.sum(once ** 2, axis=(1, 2))) <= 1.0 + 1e-12)
    np.testing.assert_array_equal(project_unit_ball(once, support=(3, 3)), once)


# filter bank -----------------------------------------------------------------

def test_filter_bank_validation_and_init():
    bank = FilterBank.random(3, 4, seed=5)
    np.testing.assert_allclose(bank.norms, 1.0, atol=1e-12)
    np.testing.assert_array_equal(bank.filters, FilterBank.random(3, 4, seed=5).filters)
    with pytest.raises(ValueError):
        FilterBank(np.full((1, 2, 2), 1.0))
    with pytest.raises(ShapeError):
        FilterBank(np.zeros((2, 3)))


def test_filter_bank_binary_layout_round_trip(tmp_path):
    bank = FilterBank.random(2, 3, seed=1)
    data = bank.to_bytes()
    assert data[:8] == b"COGDFB1\n"
    assert struct.unpack("<II", data[8:16]) == (2, 3)
    assert len(data) == 16 + 8 * 2 * 9
    np.testing.assert_array_equal(np.frombuffer(data[16:], "<f8").reshape(2, 3, 3), bank.filters)
    path = tmp_path / "bank.bin"
    bank.save(path)
    np.testing.assert_array_equal(FilterBank.load(path).filters, bank.filters)
    with pytest.raises(ValueError):
        FilterBank.from_bytes(b"NOTABANK" + data[8:])
    with pytest.raises(ValueError):
        FilterBank.from_bytes(data[:-8])


def test_code_maps_validation():
    with pytest.raises(ValueError):
        CodeMaps(np.zeros((1, 2, 2)), -1.0)
    with pytest.raises(ShapeError):
        CodeMaps(np.zeros((2, 2)))


# synthesis -------------------------------------------------------------------

def test_reconstruct_matches_direct_sum_and_is_linear():
    rng = np.random.default_rng(4)
    bank = FilterBank.random(3, 4, seed=2)
    x, y = rng.standard_normal((3, 10, 9)), rng.standard_normal((3, 10, 9))
    direct = sum(conv2d_circular_direct(x[k], bank.filters[k]) for k in range(3))
    np.testing.assert_allclose(reconstruct(bank, CodeMaps(x)), direct, atol=1e-12)
    np.testing.assert_allclose(reconstruct(bank, CodeMaps(2 * x - y)),
                               2 * reconstruct(bank, CodeMaps(x)) - reconstruct(bank, CodeMaps(y)),
                               atol=1e-12)
    assert np.all(reconstruct(bank, CodeMaps.zeros(3, (10, 9))) == 0.0)


def test_masked_objective_with_identity_mask_is_exact():
    bank, codes, imgs = planted()
    c = CodeMaps(codes[0].maps * 0.9, 0.1)
    assert objective(bank, c, imgs[0], np.ones(imgs[0].shape)) == objective(bank, c, imgs[0])


# code update -----------------------------------------------------------------

def test_code_update_recovers_single_filter_synthesis():
    rng = np.random.default_rng(5)
    bank = FilterBank.random(1, 5, seed=3)
    x = np.zeros((1, 24, 24))
    x[0, rng.integers(0, 24, 6), rng.integers(0, 24, 6)] = rng.standard_normal(6)
    b = reconstruct(bank, CodeMaps(x))
    codes = code_update(bank, CodeMaps.zeros(1, b.shape, 1e-6), b, admm=AdmmState(),
                        inner_iters=300)
    rel = np.linalg.norm(b - reconstruct(bank, codes)) / np.linalg.norm(b)
    assert rel < 1e-3


def test_code_update_large_lambda_gives_zero_codes():
    bank, _, imgs = planted()
    codes = code_update(bank, CodeMaps.zeros(4, imgs[0].shape, 1e3), imgs[0], inner_iters=10)
    assert np.all(codes.maps == 0.0)


def test_code_update_all_ones_mask_equals_no_mask():
    bank, _, imgs = planted()
    c0 = CodeMaps.zeros(4, imgs[0].shape, 0.05)
    a = code_update(bank, c0, imgs[0], None, AdmmState(), 10)
    b = code_update(bank, c0, imgs[0], np.ones(imgs[0].shape), AdmmState(), 10)
    np.testing.assert_array_equal(a.maps, b.maps)


def test_code_update_fft_path_agrees_with_cg():
    bank, _, imgs = planted()
    c0 = CodeMaps.zeros(4, imgs[0].shape, 0.05)
    a = code_update(bank, c0, imgs[0], None, AdmmState(), 8, cg_tol=1e-14, cg_maxiter=500)
    b = code_update(bank, c0, imgs[0], None, AdmmState(), 8, solver="fft")
    np.testing.assert_allclose(a.maps, b.maps, atol=1e-9)
    with pytest.raises(ValueError):
        code_update(bank, c0, imgs[0], np.ones(imgs[0].shape), solver="fft")


def test_code_update_warm_start_records_residuals():
    bank, _, imgs = planted()
    admm = AdmmState()
    c = CodeMaps.zeros(4, imgs[0].shape, 0.01)
    for _ in range(3):
        c = code_update(bank, c, imgs[0], None, admm, 10)
    assert len(admm.primal_res) == 30 and len(admm.dual_res) == 30
    assert min(admm.primal_res + admm.dual_res) >= 0.0
    assert admm.primal_res[-1] <= admm.primal_res[0]


@pytest.mark.parametrize("seed", range(4))
def test_code_update_primal_residual_settles(seed):
    # a single planted filter keeps the normal operator well conditioned
    bank, _, imgs = planted(K=1, k=5, seed=seed)
    admm = AdmmState()
    code_update(bank, CodeMaps.zeros(1, imgs[0].shape, 0.01), imgs[0], None, admm, 30)
    last = admm.primal_res[-5:]
    rises = [b for a, b in zip(last, last[1:]) if b > a]
    assert len(rises) <= 1
    for a, b in zip(last, last[1:]):
        assert b <= 1.05 * a


def test_code_update_flags_cg_failures():
    bank, _, imgs = planted()
    admm = AdmmState()
    code_update(bank, CodeMaps.zeros(4, imgs[0].shape, 0.01), imgs[0], None, admm, 3,
                cg_tol=1e-15, cg_maxiter=1)
    assert admm.cg_failures == 3


def test_code_update_shape_errors():
    bank, _, imgs = planted()
    with pytest.raises(ShapeError):
        code_update(bank, CodeMaps.zeros(3, imgs[0].shape), imgs[0])
    with pytest.raises(ShapeError):
        code_update(bank, CodeMaps.zeros(4, imgs[0].shape), imgs[0], np.ones((2, 2)))
    with pytest.raises(ValueError):
        AdmmState(rho=0.0)


# kernel update ---------------------------------------------------------------

def test_kernel_update_zero_codes_leaves_filters():
    bank = FilterBank.random(3, 5, seed=7)
    img = np.random.default_rng(8).standard_normal((16, 16))
    out = kernel_update(bank, CodeMaps.zeros(3, (16, 16)), img, AdmmState(), 10)
    np.testing.assert_allclose(out.filters, bank.filters, atol=1e-12)


def test_kernel_update_recovers_filter_from_delta_map():
    truth = FilterBank.random(1, 5, seed=9)
    delta = np.zeros((1, 20, 20))
    delta[0, 0, 0] = 1.0
    b = reconstruct(truth, CodeMaps(delta))
    out = kernel_update(FilterBank.random(1, 5, seed=10), CodeMaps(delta), b, AdmmState(), 60)
    corr = np.sum(out.filters * truth.filters) / (np.linalg.norm(out.filters) *
                                                  np.linalg.norm(truth.filters))
    assert corr >= 0.99


def test_kernel_update_respects_unit_ball():
    rng = np.random.default_rng(11)
    bank = FilterBank.random(4, 5, seed=12)
    codes = [CodeMaps(rng.standard_normal((4, 16, 16)) * 5.0) for _ in range(2)]
    imgs = [rng.standard_normal((16, 16)) * 10.0 for _ in range(2)]
    out = kernel_update(bank, codes, imgs, AdmmState(), 5)
    assert np.all(out.norms <= 1.0 + 1e-12)


def test_kernel_update_fft_path_agrees_with_cg():
    rng = np.random.default_rng(13)
    bank = FilterBank.random(3, 4, seed=14)
    codes = [CodeMaps(rng.standard_normal((3, 12, 12)) * (rng.random((3, 12, 12)) < 0.2))
             for _ in range(2)]
    imgs = [rng.standard_normal((12, 12)) for _ in range(2)]
    a = kernel_update(bank, codes, imgs, AdmmState(), 5, cg_tol=1e-14, cg_maxiter=1000)
    b = kernel_update(bank, codes, imgs, AdmmState(), 5, solver="fft")
    np.testing.assert_allclose(a.filters, b.filters, atol=1e-9)
    c = kernel_update(bank, codes[0], imgs[0], AdmmState(), 5, cg_tol=1e-14, cg_maxiter=1000)
    d = kernel_update(bank, codes[0], imgs[0], AdmmState(), 5, solver="fft")
    np.testing.assert_allclose(c.filters, d.filters, atol=1e-9)


# coordination ----------------------------------------------------------------

def two_filter_instance():
    rng = np.random.default_rng(15)
    f = rng.standard_normal((2, 3, 3))
    f[0] *= 0.9 / np.linalg.norm(f[0])   # live filter, above the median norm
    f[1] *= 0.3 / np.linalg.norm(f[1])
    bank = FilterBank(f)
    g = f.copy()
    g[0] *= 0.8
    bank_prev = FilterBank(g)
    nxt = np.zeros((2, 8, 8))
    nxt[0, 2, 3] = 0.01                    # nearly dead map
    nxt[1] = rng.standard_normal((8, 8))   # busy map
    prev = nxt.copy()
    prev[0] = rng.standard_normal((8, 8)) * 0.1
    prev[0, 5, 5] = nxt[0, 5, 5]           # one unchanged entry hits the guard
    ghat = rng.standard_normal((8, 8))
    return bank, bank_prev, CodeMaps(nxt, 0.1), CodeMaps(prev, 0.1), ghat


def test_cogd_codes_projects_only_the_dead_map():
    bank, bank_prev, nxt, prev, ghat = two_filter_instance()
    cfg = csc_cogd_config(0.1)
    out, fired = cogd_coordinate_codes(bank, nxt, prev, ghat, cfg, bank_prev=bank_prev, eta=0.5)
    np.testing.assert_array_equal(fired, [True, False])
    num = correlate2d_circular_direct(ghat, bank.filters[0] - bank_prev.filters[0])
    dx = nxt.maps[0] - prev.maps[0]
    c = np.where(np.abs(dx) < 1e-8, ghat.sum(), num / np.where(np.abs(dx) < 1e-8, 1.0, dx))
    expected = nxt.maps[0] + 0.1 * 0.5 * c * prev.maps[0]
    np.testing.assert_allclose(out.maps[0], expected, rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(out.maps[1], nxt.maps[1])


def test_cogd_codes_maps_above_mean_are_never_projected():
    bank, bank_prev, nxt, prev, ghat = two_filter_instance()
    maps = nxt.maps.copy()
    maps[0] = maps[1] * 2.0  # the live filter now also has the larger map
    out, fired = cogd_coordinate_codes(bank, CodeMaps(maps), prev, ghat, csc_cogd_config(),
                                       bank_prev=bank_prev)
    assert not fired.any()
    np.testing.assert_array_equal(out.maps, maps)


def test_cogd_codes_beta_zero_is_pass_through():
    bank, bank_prev, nxt, prev, ghat = two_filter_instance()
    out, fired = cogd_coordinate_codes(bank, nxt, prev, ghat, csc_cogd_config(0.0),
                                       bank_prev=bank_prev)
    assert fired.any()
    np.testing.assert_array_equal(out.maps, nxt.maps)


def test_cogd_codes_missing_state_warns(caplog):
    bank, _, nxt, prev, ghat = two_filter_instance()
    with caplog.at_level(logging.WARNING):
        out, fired = cogd_coordinate_codes(bank, nxt, prev, ghat, csc_cogd_config())
    assert "no previous state" in caplog.text
    assert not fired.any()
    np.testing.assert_array_equal(out.maps, nxt.maps)


def test_cogd_codes_shape_errors():
    bank, bank_prev, nxt, prev, ghat = two_filter_instance()
    with pytest.raises(ShapeError):
        cogd_coordinate_codes(bank, nxt, prev, ghat[:4], csc_cogd_config(), bank_prev=bank_prev)


# learning --------------------------------------------------------------------

def test_learn_deterministic_for_identical_seeds():
    _, _, imgs = planted(n=2, size=16)
    a = learn(imgs, K=3, k=5, lam=0.05, outer_epochs=1, seed=4)
    b = learn(imgs, K=3, k=5, lam=0.05, outer_epochs=1, seed=4)
    assert a.bank.to_bytes() == b.bank.to_bytes()
    assert history_csv(a.history) == history_csv(b.history)
    assert all(x.maps.tobytes() == y.maps.tobytes() for x, y in zip(a.codes, b.codes))


def test_learn_planted_bank_reaches_small_objective():
    _, _, imgs = planted(K=4, k=7, size=32, n=2)
    res = learn(imgs, K=4, k=7, lam=1e-3, outer_epochs=20, seed=0, solver="fft")
    energy = sum(float(np.sum(b * b)) for b in imgs)
    assert res.history[-1].objective < 1e-2 * energy


def test_learn_history_and_cogd_firing():
    _, _, imgs = planted(n=2, size=16)
    res = learn(imgs, K=4, k=5, lam=0.05, outer_epochs=4, cogd=csc_cogd_config(), seed=1,
                solver="fft")
    h = res.history
    assert [r.epoch for r in h] == [0, 1, 2, 3]
    assert h[0].detector_fired_count == 0
    for r in h:
        assert np.isclose(r.objective, r.l1_term + r.data_term, rtol=1e-14)
    text = history_csv(h)
    assert text.splitlines()[0] == ",".join(HISTORY_HEADER)
    assert len(text.splitlines()) == 5


def test_learn_input_validation():
    with pytest.raises(ValueError):
        learn([], K=2)
    with pytest.raises(ValueError):
        learn([np.zeros((8, 8))], K=0)
    with pytest.raises(ShapeError):
        learn([np.zeros((8, 8)), np.zeros((9, 8))], K=1, k=3)


# inference and inpainting ----------------------------------------------------

def test_inpaint_with_full_mask_equals_fresh_reconstruction():
    bank, _, imgs = planted()
    full = inpaint(imgs[0], bank, np.ones(imgs[0].shape), 0.05, admm_iters=20)
    fresh = reconstruct(bank, infer_codes(bank, imgs[0], 0.05, admm_iters=20))
    np.testing.assert_array_equal(full, fresh)


def test_inpaint_beats_zero_fill_on_planted_image():
    bank, _, imgs = planted(K=4, k=5, size=32, density=0.02)
    b = imgs[0]
    mask = make_subsample_mask(32, 32, 0.25, seed=0).mask
    out = inpaint(b, bank, mask, 1e-3, admm_iters=100)
    peak = float(np.abs(b).max())
    ref = ImageGrid(b, peak)
    assert psnr(ref, ImageGrid(out, peak)) >= psnr(ref, ImageGrid(b * mask, peak))


def test_code_image_restores_intensity_scale():
    bank, _, imgs = planted()
    img = ImageGrid(0.5 + 0.1 * imgs[0] / np.abs(imgs[0]).max(), 1.0)
    out = code_image(img, bank, 1e-3, normalize=True, admm_iters=50)
    assert out.range_max == 1.0
    assert abs(out.pixels.mean() - img.pixels.mean()) < 1e-2
