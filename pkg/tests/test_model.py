import numpy as np
import pytest

from cordseg import tensor as T
from cordseg.errors import NonFiniteError, ShapeError, ValidationError
from cordseg.gradcheck import model_gradient_check
from cordseg.model import (AttentiveSkip, ModelConfig, SAttisUNet, TrainConfig, build_model, dice_score,
                           evaluate, mean_foreground_dice, normalize_image, pixel_accuracy, predict,
                           segmentation_loss, train, train_step)
from cordseg.nn import AdamW
from cordseg.rng import make_rng
from cordseg.synth import toy_segmentation_set
from cordseg.tensor import Tensor

TINY = dict(base_dim=8, heads=(2, 2, 4), patch=2, window=2, num_classes=3)


def tiny(**kw):
    return SAttisUNet(ModelConfig(**{**TINY, **kw}))


def test_default_config_shapes():
    cfg = ModelConfig()
    assert cfg.stride == 4 * 4 * 4 and cfg.num_stages == 3
    m = SAttisUNet(cfg)
    with T.no_grad():
        out = m(np.zeros((2, 64, 64, 1), np.float32))
    assert out.shape == (2, 64, 64, 5) and out.dtype == np.float32


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(skip_mode="sum")
    with pytest.raises(ValidationError):
        ModelConfig(base_dim=10, heads=(3, 6, 12))
    with pytest.raises(ValidationError):
        ModelConfig.from_dict({"width": 3})
    with pytest.raises(ValidationError):
        TrainConfig(w_ce=0, w_dice=0)
    assert ModelConfig.from_dict(ModelConfig(skip_mode="concat").to_dict()) == ModelConfig(skip_mode="concat")


def test_padding_and_crop_for_odd_sizes():
    m = tiny()
    with T.no_grad():
        out = m(np.zeros((1, 13, 10, 1)))
    assert out.shape == (1, 13, 10, 3)
    assert m.padded_size(13, 10) == (16, 16)


def test_force_pad_is_noop_on_aligned_input():
    m = tiny(dtype="float64")
    x = make_rng(0).standard_normal((1, 16, 16, 1))
    with T.no_grad():
        np.testing.assert_array_equal(m(x).data, m(x, force_pad=True).data)


def test_rejects_bad_input_shape():
    with pytest.raises(ShapeError):
        tiny()(np.zeros((1, 16, 16)))


def test_skip_modes():
    rng = make_rng(0)
    cfg = ModelConfig(**TINY)
    e, d = (Tensor(rng.standard_normal((1, 6, 8))) for _ in range(2))
    none = AttentiveSkip(8, 2, "none", rng, cfg, np.float64)
    assert none(e, d) is d and not none.parameters()
    att = AttentiveSkip(8, 2, "attentive", rng, cfg, np.float64)
    att.proj.weight.data[:] = 0
    att.proj.bias.data[:] = 0
    np.testing.assert_array_equal(att(e, d).data, d.data)  # residual onto the decoder path
    cat = AttentiveSkip(8, 2, "concat", rng, cfg, np.float64)
    np.testing.assert_allclose(cat(e, d).data, np.concatenate([e.data, d.data], -1) @ cat.proj.weight.data)
    with pytest.raises(ShapeError):
        att(e, Tensor(np.zeros((1, 5, 8))))


def test_skip_mode_changes_parameter_count():
    counts = {m: tiny(skip_mode=m).num_parameters() for m in ("attentive", "concat", "none")}
    assert counts["attentive"] > counts["concat"] > counts["none"]
    assert tiny(num_skips=0).num_parameters() == counts["none"]


def test_parameter_names_unique_and_stable():
    names = [n for n, _ in tiny().named_parameters()]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in tiny().named_parameters()]


def test_same_seed_same_weights():
    a, b = tiny(seed=3), tiny(seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), tiny(seed=4).parameters()))


def test_full_model_gradient_small():
    assert model_gradient_check(n_coords=6, seed=1) < 1e-3


def test_loss_weights():
    rng = make_rng(0)
    logits = Tensor(rng.standard_normal((1, 4, 4, 3)))
    y = rng.integers(0, 3, (1, 4, 4))
    ce = segmentation_loss(logits, y, 1, 0).item()
    dice = segmentation_loss(logits, y, 0, 1).item()
    assert segmentation_loss(logits, y).item() == pytest.approx(ce + dice, rel=1e-6)
    assert ce == pytest.approx(T.cross_entropy_loss(logits, y, -1).item())


def test_normalize_image_per_slice():
    img = make_rng(0).random((3, 8, 8)) * [[[1.0]], [[5.0]], [[0.0]]] + 2
    z = normalize_image(img)
    np.testing.assert_allclose(z[:2].mean((-1, -2)), 0, atol=1e-12)
    np.testing.assert_allclose(z[:2].std((-1, -2)), 1, rtol=1e-12)
    np.testing.assert_array_equal(z[2], 0)  # constant slice stays finite


def test_training_reduces_loss_and_is_deterministic():
    imgs, labs = toy_segmentation_set(8, seed=0, size=16)
    labs = np.minimum(labs, 2)
    runs = []
    for _ in range(2):
        m = tiny(seed=0)
        h = train(m, normalize_image(imgs), labs, TrainConfig(epochs=4, batch_size=4, warmup_steps=2))
        runs.append((h.epoch_loss, [p.data.copy() for p in m.parameters()]))
    assert runs[0][0][-1] < runs[0][0][0]
    assert runs[0][0] == runs[1][0]
    for p, q in zip(runs[0][1], runs[1][1]):
        np.testing.assert_array_equal(p, q)


def test_zero_lr_keeps_weights():
    m = tiny()
    before = [p.data.copy() for p in m.parameters()]
    imgs, labs = toy_segmentation_set(2, seed=0, size=16)
    train(m, imgs, np.minimum(labs, 2), TrainConfig(epochs=1, lr=0.0))
    for p, q in zip(before, m.parameters()):
        np.testing.assert_array_equal(p, q.data)


def test_nonfinite_loss_raises():
    m = tiny()
    opt = AdamW(m.parameters(), lr=1e-3)
    imgs = np.zeros((1, 16, 16))

    def bad_loss(logits, labels):
        return T.sum_(T.mul(logits, Tensor(np.full(logits.shape, np.inf, np.float32))))

    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
        train_step(m, opt, imgs, np.zeros((1, 16, 16), int), TrainConfig(), loss_fn=bad_loss)
    m.head.weight.data[0, 0] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
        train_step(m, opt, imgs, np.zeros((1, 16, 16), int), TrainConfig())


def test_metrics():
    t = np.array([[0, 1, 1, 2]])
    p = np.array([[0, 1, 2, 2]])
    assert dice_score(p, t, 1) == pytest.approx(2 / 3)
    assert dice_score(p, t, 3) == 1.0  # absent in both
    assert mean_foreground_dice(p, t, 3) == pytest.approx((2 / 3 + 2 / 3) / 2)
    assert pixel_accuracy(p, t) == 0.75


def test_predict_and_evaluate_keys():
    m = build_model(TINY).train()
    imgs, labs = toy_segmentation_set(3, seed=1, size=16)
    pred = predict(m, imgs)
    assert pred.shape == imgs.shape and pred.dtype == np.uint8 and pred.max() < 3
    res = evaluate(m, imgs, np.minimum(labs, 2))
    assert set(res) == {"mean_fg_dice", "pixel_accuracy", "dice_1", "dice_2"}
    assert m.training  # inference restores the caller's mode
