import numpy as np
import pytest

from ctfwalk import engine as E
from ctfwalk.checks import loss_errors, small_setup
from ctfwalk.encoder import EncoderConfig
from ctfwalk.engine import ShapeError, Tensor
from ctfwalk.regressor import (RegressorConfig, boundary_loss, charbonnier, cost_volume, crop_window,
                               fb_occlusion_mask, init_regressor, photo_crw_loss, regress_flow, regressed_flows)
from ctfwalk.training import clip_terms
from ctfwalk.transition import TransitionConfig, local_attention

from oracles import random_unit


@pytest.fixture(scope="module")
def setup():
    return small_setup(0)


def test_zero_head_returns_the_base_flow():
    enc, trans, cfg = EncoderConfig(levels=2, embed_dim=4, base_channels=2), TransitionConfig(window_size=3), \
        RegressorConfig(hidden=4, layers=2)
    params = init_regressor(enc, trans, cfg, 0)
    rng = np.random.default_rng(0)
    A = local_attention(random_unit(rng, 4, 4, 4), random_unit(rng, 4, 4, 4), np.zeros((4, 4, 2)), trans)
    base = rng.normal(0, 1, (4, 4, 2))
    out = regress_flow(A, rng.normal(0, 1, (4, 4, enc.channels(1))), base, params, 1, cfg, trans.temperature)
    np.testing.assert_array_equal(out.data, base)


def test_parameter_names_and_input_width():
    enc, trans, cfg = EncoderConfig(levels=3, embed_dim=4, base_channels=2), TransitionConfig(window_size=5), \
        RegressorConfig(hidden=6, layers=3)
    params = init_regressor(enc, trans, cfg, 1)
    assert params["regressor.level2.conv0.weight"].shape == (3, 3, 25 + enc.channels(2) + 2, 6)
    assert params["regressor.level3.head.weight"].shape == (3, 3, 6, 2)
    assert not np.any(params["regressor.level1.head.weight"].data)


def test_cost_volume_is_cosine_similarity():
    rng = np.random.default_rng(2)
    x = random_unit(rng, 3, 3, 4)
    trans = TransitionConfig(window_size=3, temperature=0.05)
    A = local_attention(x, x, np.zeros((3, 3, 2)), trans)
    cv = cost_volume(A, trans.temperature)
    assert cv.shape == (3, 3, 9)
    # centre slot of the centre pixel compares the pixel with itself
    assert cv[1, 1, 4] == pytest.approx(1.0)
    assert np.abs(cv).max() <= 1 + 1e-9


def test_misaligned_inputs_raise():
    enc, trans, cfg = EncoderConfig(levels=2, embed_dim=4, base_channels=2), TransitionConfig(window_size=3), \
        RegressorConfig(hidden=2, layers=1)
    params = init_regressor(enc, trans, cfg, 0)
    x = np.ones((4, 4, 1))
    A = local_attention(x, x, np.zeros((4, 4, 2)), trans)
    with pytest.raises(ShapeError):
        regress_flow(A, np.zeros((3, 4, enc.channels(1))), np.zeros((4, 4, 2)), params, 1, cfg, 0.07)


def test_fb_mask_examples():
    cfg = RegressorConfig()
    f = np.full((4, 4, 2), [1.0, 0.0])
    assert fb_occlusion_mask(f, -f, cfg).all()
    assert not fb_occlusion_mask(f, f, cfg).any()
    assert fb_occlusion_mask(np.zeros((3, 3, 2)), np.zeros((3, 3, 2)), cfg).all()


def test_fb_mask_relative_threshold_grows_with_motion():
    cfg = RegressorConfig(fb_threshold_abs=0.05, fb_threshold_rel=0.01)
    small = np.full((3, 3, 2), [0.0, 0.0])
    big = np.full((3, 3, 2), [5.0, 0.0])
    wobble = np.full((3, 3, 2), [0.5, 0.0])
    # |gap|^2 = 0.25: rejected at rest, accepted under 5 px motion (0.05 + 0.01 * 50 = 0.55)
    assert not fb_occlusion_mask(small + wobble, -small, cfg).any()
    assert fb_occlusion_mask(big + wobble, -big, cfg).all()


def test_fb_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        fb_occlusion_mask(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)), RegressorConfig())


def test_charbonnier_values():
    np.testing.assert_allclose(charbonnier(Tensor([0.0, 3.0]), eps=4.0).data, [4.0, 5.0])


def test_photo_loss_examples():
    rng = np.random.default_rng(3)
    x = random_unit(rng, 4, 5, 3)
    zero = np.zeros((4, 5, 2))
    cfg = RegressorConfig(constraint_weight=1.0, feature_weight=0.1)
    assert photo_crw_loss(x, x, zero, zero, cfg).item() == pytest.approx(0.0, abs=1e-12)
    g = np.full((4, 5, 2), [1.0, 1.0])
    assert photo_crw_loss(x, x, zero, g, cfg).item() == pytest.approx(2.0)
    far = np.full((4, 5, 2), [3.0, 4.0])
    cfg_a = RegressorConfig(constraint_weight=2.0, feature_weight=0.0)
    assert photo_crw_loss(x, x, far, zero, cfg_a).item() == pytest.approx(50.0)


def test_photo_mask_gates_only_the_feature_term():
    rng = np.random.default_rng(4)
    xs, xt = random_unit(rng, 4, 4, 3), random_unit(rng, 4, 4, 3)
    zero = np.zeros((4, 4, 2))
    cfg = RegressorConfig(constraint_weight=1.0, feature_weight=1.0)
    none_visible = np.zeros((4, 4), bool)
    g = np.full((4, 4, 2), [0.5, 0.0])
    assert photo_crw_loss(xs, xt, zero, g, cfg, mask=none_visible).item() == pytest.approx(0.25)
    one = np.zeros((4, 4), bool)
    one[1, 2] = True
    want = ((xs[1, 2] - xt[1, 2]) ** 2).sum()
    assert photo_crw_loss(xs, xt, zero, zero, cfg, mask=one).item() == pytest.approx(want)


def test_charbonnier_photo_needs_images():
    cfg = RegressorConfig(photometric="charbonnier")
    with pytest.raises(ValueError):
        photo_crw_loss(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), cfg)
    img = np.random.default_rng(0).uniform(-1, 1, (3, 3, 3))
    zero = np.zeros((3, 3, 2))
    cfg = RegressorConfig(photometric="charbonnier", constraint_weight=0.0, feature_weight=1.0, charbonnier_eps=0.5)
    got = photo_crw_loss(None, None, zero, zero, cfg, image_s=img, image_t=img).item()
    assert got == pytest.approx(0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        RegressorConfig(photometric="l1")
    with pytest.raises(ValueError):
        RegressorConfig(crop_margin=0)
    with pytest.raises(ValueError):
        RegressorConfig(feature_weight=-1)


def test_crop_window_divisibility_and_even_offsets():
    rng = np.random.default_rng(5)
    for _ in range(20):
        top, left, ch, cw = crop_window(64, 48, 8, 3, rng)
        assert ch % 8 == 0 and cw % 8 == 0
        assert top % 2 == 0 and left % 2 == 0
        assert top + ch <= 64 and left + cw <= 48
    assert crop_window(64, 64, 8, 3) == (8, 8, 48, 48)
    with pytest.raises(ShapeError):
        crop_window(16, 16, 8, 3)


def test_boundary_loss_zero_when_no_match_leaves_the_crop(setup):
    run, model, frames = setup
    teacher = np.zeros((8, 8, 2))
    loss = boundary_loss(frames, model.params, model.encoder, model.transition, model.regressor,
                         teacher_flow=teacher, window=(4, 4, 8, 8))
    assert loss.item() == 0.0


def test_boundary_loss_supervises_leaving_pixels_only(setup):
    run, model, frames = setup
    teacher = np.zeros((8, 8, 2))
    teacher[..., 0] = 3.0   # every crop pixel whose x + 3 exceeds the crop width
    window = (4, 4, 8, 8)
    loss = boundary_loss(frames, model.params, model.encoder, model.transition, model.regressor,
                         teacher_flow=teacher, window=window).item()
    crop = frames[:2, 4:12, 4:12]
    _, _, flows = regressed_flows(crop, model.params, model.encoder, model.transition, model.regressor)
    student = flows[-1].data
    leaving = np.zeros((4, 4), bool)
    leaving[:, 1:] = True
    err = ((student - teacher[2:6, 2:6]) ** 2).sum(-1)
    assert loss == pytest.approx(err[leaving].mean())


def test_full_frame_window_gives_zero(setup):
    run, model, frames = setup
    loss = boundary_loss(frames, model.params, model.encoder, model.transition, model.regressor,
                         window=(0, 0, 16, 16))
    assert loss.item() == 0.0


def test_regressor_losses_leave_the_encoder_untouched(setup):
    run, model, frames = setup
    for p in model.params.values():
        p.grad = None
    terms = clip_terms(frames, model, run, 2, "regressor", np.random.default_rng(0))
    E.add(terms["photo"], terms["bound"]).backward()
    for name, p in model.params.items():
        if name.startswith("encoder."):
            assert p.grad is None or not np.any(p.grad), name
    assert any(p.grad is not None and np.any(p.grad) for n, p in model.params.items() if n.startswith("regressor."))


def test_regressor_loss_gradients_match_finite_differences():
    errors = loss_errors(0, n_entries=3)
    assert max(errors.values()) < 1e-4, errors


def test_fb_mask_flags_missing_backward_flow():
    f = np.full((6, 6, 2), [2.0, 0.0])
    mask = fb_occlusion_mask(f, np.zeros((6, 6, 2)), RegressorConfig(fb_threshold_abs=0.05, fb_threshold_rel=0.01))
    assert not mask[1:-1, 1:-1].any()


@pytest.mark.parametrize("fx,fy,bx,by", [(2, 0, -2, 0), (1.5, -1, 0, 0), (0.3, 0.2, -0.1, -0.2), (3, 1, -3, 0)])
def test_fb_mask_symmetric_for_uniform_flows(fx, fy, bx, by):
    cfg = RegressorConfig()
    f, b = np.full((5, 5, 2), [fx, fy]), np.full((5, 5, 2), [bx, by])
    m = fb_occlusion_mask(f, b, cfg)
    np.testing.assert_array_equal(m[2, 2], fb_occlusion_mask(b, f, cfg)[2, 2])
    np.testing.assert_array_equal(m[2, 2], fb_occlusion_mask(-f, -b, cfg)[2, 2])


def test_zero_agreement_weight_leaves_the_feature_term():
    rng = np.random.default_rng(9)
    xs, xt = random_unit(rng, 5, 5, 3), random_unit(rng, 5, 5, 3)
    f = rng.uniform(-1, 1, (5, 5, 2))
    cfg = RegressorConfig(constraint_weight=0.0, feature_weight=0.7)
    from ctfwalk.transition import warp
    want = 0.7 * ((xs - warp(xt, f).data) ** 2).sum(-1).mean()
    assert photo_crw_loss(xs, xt, f, rng.normal(0, 5, (5, 5, 2)), cfg).item() == pytest.approx(want)


def test_strong_agreement_pulls_the_flow_onto_g():
    rng = np.random.default_rng(10)
    xs, xt = random_unit(rng, 4, 4, 3), random_unit(rng, 4, 4, 3)
    g = rng.uniform(-1, 1, (4, 4, 2))
    cfg = RegressorConfig(constraint_weight=100.0, feature_weight=0.1)
    f = Tensor(np.zeros((4, 4, 2)), requires_grad=True)
    for _ in range(400):
        f.grad = None
        photo_crw_loss(xs, xt, f, g, cfg).backward()
        f.data -= 1e-3 * f.grad
    assert np.abs(f.data - g).max() < 1e-2


def test_boundary_loss_vanishes_on_static_constant_frames(setup):
    run, model, _ = setup
    frames = np.zeros((2, 16, 16, 3))
    loss = boundary_loss(frames, model.params, model.encoder, model.transition, model.regressor,
                         window=(4, 4, 8, 8))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_boundary_loss_positive_for_motion_leaving_the_crop():
    from ctfwalk.synthdata import generate_translation_sequence
    run, model, _ = small_setup(1)
    frames = generate_translation_sequence(3, 16, shift=(4, 0)).frames
    teacher = np.full((8, 8, 2), [2.0, 0.0])
    loss = boundary_loss(frames, model.params, model.encoder, model.transition, model.regressor,
                         teacher_flow=teacher, window=(4, 4, 8, 8))
    assert loss.item() > 0
