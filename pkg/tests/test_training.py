import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import gradient_check, grad_problem

from trackssm.data_io import SyntheticScene, gen_scene, segment_arrays
from trackssm.errors import ConfigError, DimensionError, TrainingError
from trackssm.model import BBox, ModelConfig, TrackSSM, TrajectoryHistory
from trackssm.training import (
    LossWeights,
    SegmentArrays,
    TrainConfig,
    TrainingSegment,
    adam_step,
    backward,
    batch_loss,
    box_giou_loss,
    giou_loss,
    layer_targets,
    make_optimizer,
    optimizer_step_count,
    s2l_targets,
    smooth_l1,
    smooth_l1_loss,
    total_loss,
    train,
    train_config_from_dict,
    write_loss_csv,
)

T = torch.float64
TINY = ModelConfig(d_model=8, d_dec=8, d_state=4, enc_layers=1, n_layers=2, pe_dim=4)


def tb(*v):
    return torch.tensor(v, dtype=T)


box_st = st.tuples(
    st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 10), st.floats(0.01, 10)
)


# --- S2L ---------------------------------------------------------------------


def test_s2l_centers_one_to_six():
    tg = s2l_targets(tb(0, 0, 10, 10), tb(6, 0, 10, 10), 6)
    assert tg[:, 0].tolist() == [1, 2, 3, 4, 5, 6]
    assert bool((tg[:, 2:] == 10).all())


def test_s2l_single_layer():
    nxt = tb(0.3, 0.1, 2, 5)
    assert torch.equal(s2l_targets(tb(0, 0, 1, 1), nxt, 1)[0], nxt)


def test_s2l_rejects_zero_layers():
    with pytest.raises(ConfigError):
        s2l_targets(tb(0, 0, 1, 1), tb(1, 1, 1, 1), 0)


@settings(max_examples=200, deadline=None)
@given(box_st, box_st, st.sampled_from([1, 2, 3, 6, 12]))
def test_s2l_uniform_spacing_and_exact_endpoint(a, b, n):
    a, b = tb(*a), tb(*b)
    tg = s2l_targets(a, b, n)
    assert torch.equal(tg[-1], b)
    full = torch.cat([a[None], tg])
    steps = full[1:] - full[:-1]
    assert torch.allclose(steps, ((b - a) / n).expand_as(steps), atol=1e-12, rtol=0)


def test_layer_targets_without_s2l():
    a, b = tb(0, 0, 1, 1), tb(3, 1, 1, 2)
    tg = layer_targets(a, b, 4, s2l=False)
    assert tg.shape == (4, 4) and bool((tg == b).all())
    assert torch.equal(layer_targets(a, b, 1, s2l=False), layer_targets(a, b, 1, s2l=True))


# --- losses ------------------------------------------------------------------


def test_smooth_l1_examples():
    b = BBox(1, 1, 1, 1)
    assert smooth_l1_loss(b, b) == 0.0
    assert smooth_l1_loss(BBox(3, 1, 1, 1), b) == 0.375
    d = torch.tensor([1.0], dtype=T)
    assert 0.5 * d.item() ** 2 == 0.5 and d.item() - 0.5 == 0.5
    assert smooth_l1(tb(1, 0, 0, 0), tb(0, 0, 0, 0)).item() == 0.125


def test_smooth_l1_boundary_continuity_and_slope():
    eps = 1e-9
    z = torch.zeros(4, dtype=T)
    below = smooth_l1(tb(1 - eps, 0, 0, 0), z).item() * 4
    above = smooth_l1(tb(1 + eps, 0, 0, 0), z).item() * 4
    assert abs(below - 0.5) < 2e-9 and abs(above - 0.5) < 2e-9
    for x in (1 - 1e-6, 1 + 1e-6):
        p = tb(x, 0, 0, 0).requires_grad_()
        smooth_l1(p, z).backward()
        assert p.grad[0].item() * 4 == pytest.approx(1.0, abs=2e-6)


def test_giou_examples():
    b = BBox(0.5, 0.5, 1, 1)
    assert box_giou_loss(b, b) == pytest.approx(0.0, abs=1e-15)
    assert box_giou_loss(b, BBox(1.5, 1.5, 1, 1)) == pytest.approx(1.5, abs=1e-15)
    far = box_giou_loss(b, BBox(1e6, 1e6, 1, 1))
    assert 1.99 < far < 2.0


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_giou_loss_bounds(a, b):
    v = giou_loss(tb(*a), tb(*b)).item()
    assert -1e-12 <= v < 2.0


def test_total_loss_zero_iff_on_target():
    a, b = tb(0.1, 0.2, 0.3, 0.4), tb(0.2, 0.1, 0.3, 0.5)
    tg = s2l_targets(a, b, 3)
    w = LossWeights(use_giou=True)
    assert total_loss(tg, tg, w).item() == pytest.approx(0.0, abs=1e-15)
    off = tg.clone()
    off[1, 0] += 0.01
    assert total_loss(off, tg, w).item() > 0


def test_total_loss_pure_giou_linearity():
    a, b = tb(0.5, 0.5, 1, 1), tb(1.0, 0.5, 1, 1)
    tg = s2l_targets(a, b, 4)
    pred = tg.clone()
    pred[2] = tb(1.5, 1.5, 1, 1)
    w = LossWeights(lambda1=0.0, lambda2=0.7, use_giou=True)
    expect = 0.7 * giou_loss(pred[2], tg[2]).item() / 4
    assert total_loss(pred, tg, w).item() == pytest.approx(expect, rel=1e-12)


def test_total_loss_smooth_l1_only_ignores_giou_weight():
    tg = s2l_targets(tb(0, 0, 1, 1), tb(1, 0, 1, 1), 2)
    pred = tg + 0.1
    a = total_loss(pred, tg, LossWeights(1.0, 5.0, use_giou=False))
    b = total_loss(pred, tg, LossWeights(1.0, 0.0, use_giou=True))
    assert torch.allclose(a, b, atol=1e-15)


def test_total_loss_length_mismatch():
    with pytest.raises(DimensionError):
        total_loss(torch.zeros(2, 4, dtype=T), torch.zeros(3, 4, dtype=T), LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(-1.0)
    with pytest.raises(ConfigError):
        LossWeights(0.0, 1.0, use_giou=False)


# --- backward ----------------------------------------------------------------


def test_zero_loss_batch_zero_gradients():
    m = TrackSSM(TINY)
    hist = torch.rand(3, 5, 8, dtype=T) + 0.1
    # identity model predicts the last box at every layer, so targets equal to it give zero loss
    loss, grads = backward(m, hist, hist[:, -1, :4].clone(), LossWeights())
    assert loss == 0.0
    assert all(bool((g == 0).all()) for g in grads.values())


def test_duplicate_segment_mean_invariance():
    model, hist, tgt = grad_problem(3, batch=1)
    _, g1 = backward(model, hist, tgt, LossWeights(use_giou=True))
    _, g2 = backward(model, hist.repeat(2, 1, 1), tgt.repeat(2, 1), LossWeights(use_giou=True))
    for k in g1:
        assert torch.allclose(g1[k], g2[k], atol=1e-14, rtol=1e-10)


def test_nonfinite_loss_raises_with_batch_index():
    m = TrackSSM(TINY)
    hist = torch.rand(2, 3, 8, dtype=T) + 0.1
    tgt = hist[:, -1, :4].clone()
    tgt[0, 0] = float("nan")
    with pytest.raises(TrainingError) as ei:
        backward(m, hist, tgt, LossWeights(), batch_index=7)
    assert ei.value.batch_index == 7


def test_gradients_reach_every_group():
    model, hist, tgt = grad_problem(0)
    _, grads = backward(model, hist, tgt, LossWeights(use_giou=True))
    # layer 0 starts from h = 0, so its A never reaches the output; layer 1's does
    assert grads["decoder.layers.0.flow_ssm.A_log"].abs().max().item() == 0
    for key in ("embed.linear.weight", "encoder.blocks.0.A_log", "decoder.layers.1.flow_ssm.A_log",
                "decoder.layers.1.flow_ssm.proj.weight", "decoder.layers.1.split.weight", "decoder.layers.0.ffn_out.weight"):
        assert grads[key].abs().max().item() > 0


def test_gradient_check_sampled_detached():
    errs = gradient_check(0, end_to_end=False, max_entries=12)
    assert max(errs.values()) <= 1e-4, errs


def test_gradient_check_sampled_end_to_end():
    errs = gradient_check(1, end_to_end=True, max_entries=12)
    assert max(errs.values()) <= 1e-4, errs


def test_detach_differs_from_end_to_end():
    w = LossWeights(use_giou=True)
    m1, hist, tgt = grad_problem(2, end_to_end=False)
    m2, _, _ = grad_problem(2, end_to_end=True)
    _, g1 = backward(m1, hist, tgt, w)
    _, g2 = backward(m2, hist, tgt, w)
    assert torch.equal(g1["decoder.layers.1.ffn_out.bias"], g2["decoder.layers.1.ffn_out.bias"])
    assert not torch.allclose(g1["decoder.layers.0.ffn_out.weight"], g2["decoder.layers.0.ffn_out.weight"])


def test_stop_gradient_keeps_residual_path():
    w = LossWeights(use_giou=True)
    model, hist, tgt = grad_problem(3, end_to_end=False)
    _, grads = backward(model, hist, tgt, w)
    # gradient of layer 0's own loss term alone, with the same 1/N_dec weighting
    _, per = model(hist)
    own = total_loss([per[0], per[0].detach()], layer_targets(hist[:, -1, :4], tgt, 2), w).mean()
    b0 = model.decoder.layers[0].ffn_out.bias
    (g_own,) = torch.autograd.grad(own, b0)
    # layer 1's loss still reaches layer 0 through the additive residual
    assert not torch.allclose(grads["decoder.layers.0.ffn_out.bias"], g_own)


# --- adam --------------------------------------------------------------------


def _scalar_model():
    m = TrackSSM(TINY)
    return m, {n: torch.zeros_like(p) for n, p in m.named_parameters()}


def test_adam_zero_gradient_no_change():
    m, grads = _scalar_model()
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    opt = make_optimizer(m, 1e-3)
    adam_step(m, grads, opt)
    for n, p in m.named_parameters():
        assert torch.equal(p, before[n])


def test_adam_first_step_matches_hand_formula():
    m, grads = _scalar_model()
    name = "decoder.layers.0.ffn_out.bias"
    grads[name] = torch.tensor([0.3, -2.0, 1e-3, 0.0], dtype=T)
    lr, eps = 1e-3, 1e-8
    opt = make_optimizer(m, lr, eps=eps)
    adam_step(m, grads, opt)
    p = dict(m.named_parameters())[name].detach()
    # m_hat = g, v_hat = g^2 after bias correction
    expect = [-lr * g / (abs(g) + eps) for g in (0.3, -2.0, 1e-3, 0.0)]
    assert np.allclose(p.numpy(), expect, rtol=1e-12, atol=1e-18)
    assert np.all(np.abs(p.numpy()) <= lr)


def test_adam_step_count_and_shape_check():
    m, grads = _scalar_model()
    opt = make_optimizer(m)
    for k in range(1, 4):
        adam_step(m, grads, opt)
        assert optimizer_step_count(opt) == k
    bad = dict(grads)
    bad["embed.linear.bias"] = torch.zeros(3, dtype=T)
    with pytest.raises(DimensionError):
        adam_step(m, bad, opt)
    with pytest.raises(DimensionError):
        adam_step(m, {}, opt)


def test_adam_defaults():
    g = make_optimizer(TrackSSM(TINY)).param_groups[0]
    assert g["lr"] == 1e-4 and g["betas"] == (0.9, 0.999) and g["eps"] == 1e-8
    c = TrainConfig()
    assert (c.lr, c.batch_size, c.epochs) == (1e-4, 256, 30)


# --- train -------------------------------------------------------------------


def toy_segments(count=16):
    segs = []
    for i in range(count):
        v = np.array([0.004 * (1 + i % 4), -0.002 * (i % 3), 0, 0])
        start = np.array([0.2 + 0.03 * i, 0.5, 0.05, 0.1])
        boxes = start + np.arange(6)[:, None] * v
        segs.append(TrainingSegment(TrajectoryHistory.from_boxes(boxes[:5]), BBox.from_array(boxes[5])))
    return segs


def test_train_two_epochs_decreases_loss():
    _, _, logs = train(toy_segments(), TINY, TrainConfig(epochs=2, batch_size=4, lr=1e-3))
    assert [e.epoch for e in logs] == [1, 2]
    assert logs[-1].loss < logs[0].loss
    assert logs[-1].step == 8


def test_train_deterministic():
    cfg = TrainConfig(epochs=2, batch_size=5, lr=1e-3, seed=4)
    m1, _, l1 = train(toy_segments(), TINY, cfg)
    m2, _, l2 = train(toy_segments(), TINY, cfg)
    assert [e.loss for e in l1] == [e.loss for e in l2]
    for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
        assert torch.equal(a, b)


def test_s2l_off_single_layer_identical():
    cfg1 = ModelConfig(**{**TINY.to_dict(), "n_layers": 1})
    _, _, a = train(toy_segments(), cfg1, TrainConfig(epochs=2, batch_size=8, lr=1e-3, s2l=True))
    _, _, b = train(toy_segments(), cfg1, TrainConfig(epochs=2, batch_size=8, lr=1e-3, s2l=False))
    assert [e.loss for e in a] == [e.loss for e in b]


def test_train_resumes_optimizer_steps():
    model, opt, logs = train(toy_segments(), TINY, TrainConfig(epochs=1, batch_size=8, lr=1e-3))
    _, _, more = train(toy_segments(), TINY, TrainConfig(epochs=1, batch_size=8, lr=1e-3), model, opt)
    assert more[0].step == logs[0].step + 2


def test_train_rejects_empty_dataset():
    with pytest.raises(ConfigError):
        train([], TINY, TrainConfig())
    with pytest.raises(ConfigError):
        train(SegmentArrays(np.zeros((0, 5, 8)), np.zeros((0, 4))), TINY, TrainConfig())


def test_loss_csv(tmp_path):
    _, _, logs = train(toy_segments(4), TINY, TrainConfig(epochs=2, batch_size=4))
    p = tmp_path / "loss.csv"
    write_loss_csv(logs, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,step,loss"
    assert len(lines) == 3
    assert float(lines[2].split(",")[2]) == logs[1].loss


def test_train_config_from_dict():
    assert train_config_from_dict({"epochs": 3}).epochs == 3
    with pytest.raises(ConfigError):
        train_config_from_dict({"epoch": 3})
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)


def test_scene_segments_feed_training():
    gt, _ = gen_scene(SyntheticScene(n_objects=2, n_frames=12, seed=1))
    data = segment_arrays(gt.normalized(1280, 720), 5)
    assert len(data) == 2 * 11
    _, _, logs = train(data, TINY, TrainConfig(epochs=1, batch_size=64))
    assert np.isfinite(logs[0].loss)
    assert batch_loss(TrackSSM(TINY), torch.as_tensor(data.histories), torch.as_tensor(data.targets), LossWeights()).item() > 0
