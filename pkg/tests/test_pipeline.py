import copy

import numpy as np
import pytest
import torch

from jointmri import data, pipeline, sampler
from jointmri.errors import ConfigError, ContractError, DataError, NumericalError
from jointmri.pipeline import (
    TrainConfig,
    acquire,
    evaluate,
    forward_train,
    freeze_and_finetune,
    init_state,
    run_baseline,
    train,
    train_joint,
)

SIZE = 16


@pytest.fixture(scope="module")
def slices():
    return data.phantom_dataset(2, 6, SIZE, SIZE, 4, seed=11)


def cfg(**kw):
    base = dict(image_size=SIZE, class_count=4, seed=3)
    return pipeline.preset("test", **{**base, **kw})


def params_of(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


# --- config ------------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError, match="lambda is fixed to 0"):
        TrainConfig(mode="loupe", lam=0.3)
    with pytest.raises(ConfigError):
        TrainConfig(mode="baseline-fixed", mask="learned")
    with pytest.raises(ConfigError):
        TrainConfig(mode="semunet", mask="radial")
    with pytest.raises(ConfigError):
        TrainConfig(rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(image_size=20, recon_depth=3)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"mode": "semunet", "bogus": 1})
    c = cfg(lam=0.2)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_derive_seed_streams_independent():
    a = pipeline.derive_seed(0, "noise", 1)
    assert a == pipeline.derive_seed(0, "noise", 1)
    assert len({a, pipeline.derive_seed(0, "noise", 2), pipeline.derive_seed(0, "data", 1),
                pipeline.derive_seed(1, "noise", 1)}) == 4


# --- forward chain -----------------------------------------------------------------------


def test_identity_mask_zero_filled_is_image(slices):
    images, _ = pipeline.stack_batch(slices[:3])
    zf = acquire(images, torch.ones(SIZE, SIZE))
    np.testing.assert_allclose(zf.real.numpy(), images[:, 0].numpy(), atol=1e-6)
    assert float(zf.imag.abs().max()) < 1e-6


def test_forward_train_shapes_and_loss(slices):
    state = init_state(cfg())
    recon, logits, loss = forward_train(state, slices[:4], noise_seed=0)
    assert recon.shape == (4, 1, SIZE, SIZE) and logits.shape == (4, 4, SIZE, SIZE)
    f = loss.as_floats()
    assert f["total"] == pytest.approx(f["recon"] + 0.1 * f["seg"], rel=1e-6)
    with pytest.raises(ContractError):
        forward_train(state, slices[:4])  # relaxed mask without noise seed


def test_all_three_modules_receive_gradient(slices):
    state = init_state(cfg())
    _, _, loss = forward_train(state, slices[:4], noise_seed=0)
    loss.total.backward()
    assert float(state.prob_mask.weights.grad.abs().sum()) > 0
    assert any(float(p.grad.abs().sum()) > 0 for p in state.recon.parameters())
    assert any(float(p.grad.abs().sum()) > 0 for p in state.seg.parameters())


def test_single_step_descent():
    toy = data.phantom_dataset(1, 4, 8, 8, 3, seed=0)
    c = TrainConfig(image_size=8, class_count=3, recon_base=4, recon_depth=1, seg_base=4,
                    seg_depth=1, learning_rate=1e-4, seed=0)
    state = init_state(c)
    before = forward_train(state, toy, noise_seed=5)[2].as_floats()["total"]
    state.optimizer.zero_grad()
    forward_train(state, toy, noise_seed=5)[2].total.backward()
    state.optimizer.step()
    after = forward_train(state, toy, noise_seed=5)[2].as_floats()["total"]
    assert after < before


# --- training schedule --------------------------------------------------------------------


def test_zero_joint_epochs_leaves_state_unchanged(slices):
    c = cfg(joint_epochs=0)
    fresh = init_state(c)
    state = train_joint(c, slices)
    assert state.epoch == 0 and state.history == []
    assert torch.equal(state.prob_mask.weights, fresh.prob_mask.weights)
    assert same(params_of(state.recon), params_of(fresh.recon))


def test_rate_invariant_logged_every_epoch(slices):
    c = cfg(joint_epochs=3, finetune_epochs=2, rate=0.2)
    state = train(c, slices)
    joint = [r for r in state.history if r["stage"] == "joint"]
    assert len(joint) == 3
    for row in joint:
        assert abs(row["mask_mean"] - 0.2) < 1e-6
    n = sampler.num_samples(0.2, SIZE * SIZE)
    assert state.binary_mask.ones_count == n
    for row in state.history[3:]:
        assert row["mask_mean"] == n / SIZE**2


def test_stage_machine(slices):
    state = train_joint(cfg(), slices)
    with pytest.raises(ContractError):
        pipeline.predict(state, pipeline.stack_batch(slices)[0])
    with pytest.raises(ContractError):
        state.set_stage("finetune")  # no binary mask yet
    freeze_and_finetune(state, slices)
    with pytest.raises(ContractError):
        state.set_stage("joint")
    with pytest.raises(ContractError):
        train_joint(state, slices)
    with pytest.raises(ContractError):
        freeze_and_finetune(state, slices)
    pipeline.finish(state)
    assert state.stage == "test"


def test_freeze_contract(slices):
    state = train_joint(cfg(), slices)
    expected = sampler.booleanize(state.prob_mask)
    weights = state.prob_mask.weights.detach().clone()
    freeze_and_finetune(state, slices)
    assert state.binary_mask == expected
    assert torch.equal(state.prob_mask.weights, weights)


def test_zero_finetune_epochs_is_evaluable(slices):
    state = train(cfg(finetune_epochs=0), slices)
    rep = evaluate(state, slices[:2])
    assert len(rep.rows) == 2


def test_mode_equivalence_semunet_lambda0_vs_loupe(slices):
    a = train_joint(cfg(lam=0.0), slices, train_seg=False)
    b = train_joint(cfg(mode="loupe", lam=0.0), slices)
    assert torch.equal(a.prob_mask.weights, b.prob_mask.weights)
    assert same(params_of(a.recon), params_of(b.recon))
    assert same(params_of(a.seg), params_of(b.seg))
    assert all(r["seg"] == 0 for r in b.history)


def test_loupe_seg_keeps_loupe_pipeline(slices):
    loupe = run_baseline("loupe", cfg(mode="loupe", lam=0.0), slices)
    recon_before = params_of(loupe.recon)
    seg_before = params_of(loupe.seg)
    ls = run_baseline("loupe-seg", cfg(mode="loupe-seg", lam=0.0, seg_epochs=2), slices, loupe_state=loupe)
    assert same(params_of(ls.recon), recon_before)
    assert torch.equal(ls.prob_mask.weights, loupe.prob_mask.weights)
    assert ls.binary_mask == loupe.binary_mask
    assert not same(params_of(ls.seg), seg_before)
    # the loupe state itself was not touched
    assert same(params_of(loupe.seg), seg_before)
    assert ls.config.method_name == "loupe-seg" and ls.stage == "test"


def test_loupe_seg_loss_has_no_path_to_sampler(slices):
    loupe = run_baseline("loupe", cfg(mode="loupe", lam=0.0), slices)
    pipeline._set_trainable(loupe, True, True, True)
    loss = pipeline._seg_only_loss(loupe, pipeline.stack_batch(slices[:4]))
    loss.total.backward()
    assert loupe.prob_mask.weights.grad is None
    assert all(p.grad is None for p in loupe.recon.parameters())
    assert any(p.grad is not None for p in loupe.seg.parameters())


def test_loupe_joint_seg_gradient_wrt_sampler_is_zero(slices):
    state = init_state(cfg(mode="loupe", lam=0.0))
    _, _, loss = forward_train(state, slices[:4], noise_seed=1, lam=0.0, run_seg=True)
    g_total = torch.autograd.grad(loss.total, state.prob_mask.weights, retain_graph=True)[0]
    g_recon = torch.autograd.grad(loss.recon, state.prob_mask.weights)[0]
    assert torch.equal(g_total, g_recon)


def test_training_is_deterministic(slices):
    a = train(cfg(), slices)
    b = train(cfg(), slices)
    assert same(params_of(a.recon), params_of(b.recon))
    assert same(params_of(a.seg), params_of(b.seg))
    assert a.binary_mask == b.binary_mask
    assert a.history == b.history


def test_baseline_fixed_masks_do_not_learn(slices):
    state = run_baseline("baseline-fixed", cfg(mode="baseline-fixed", mask="random"), slices)
    assert state.prob_mask is None
    assert state.binary_mask == sampler.fixed_mask("random", SIZE, SIZE, 0.1, pipeline.derive_seed(3, "mask"))
    with pytest.raises(ConfigError):
        run_baseline("semunet", cfg(), slices)


def test_nan_loss_aborts_with_mask_stats(slices):
    state = init_state(cfg())
    with torch.no_grad():
        state.prob_mask.weights[0, 0] = float("nan")
    with pytest.raises(NumericalError, match="mask stats"):
        train_joint(state, slices)


def test_nan_in_network_aborts(slices):
    state = init_state(cfg(mode="baseline-fixed", mask="radial"))
    with torch.no_grad():
        next(state.recon.parameters()).fill_(float("nan"))
    with pytest.raises(NumericalError, match="non-finite loss"):
        train_joint(state, slices)


# --- evaluation and checkpoints ---------------------------------------------------------


def test_bypass_gives_capped_psnr(slices):
    state = train(cfg(), slices)
    rep = evaluate(state, slices[:3], bypass=True)
    assert all(r["psnr"] == 99.0 for r in rep.rows)
    assert rep.method.endswith("+bypass")


def test_evaluate_rows_and_ranges(slices):
    state = train(cfg(), slices)
    rep = evaluate(state, slices[:4])
    assert len(rep.rows) == 4
    for r in rep.rows:
        assert 0 <= r["dsc"] <= 100 and r["ssim"] <= 100 and np.isfinite(r["psnr"])
    s = rep.summary()
    assert s["psnr"] == pytest.approx(np.mean([r["psnr"] for r in rep.rows]))


def test_checkpoint_roundtrip_bit_identical(slices, tmp_path):
    state = train(cfg(), slices)
    state.meta = {"data": {"data": "phantom"}}
    pipeline.save_state(state, tmp_path / "ck.pt")
    back = pipeline.load_state(tmp_path / "ck.pt")
    images, _ = pipeline.stack_batch(slices)
    r1, s1 = pipeline.predict(state, images)
    r2, s2 = pipeline.predict(back, images)
    assert torch.equal(r1, r2) and torch.equal(s1, s2)
    assert back.binary_mask == state.binary_mask and back.history == state.history
    assert back.meta == state.meta and back.stage == "test"
    with pytest.raises(DataError):
        pipeline.load_state(tmp_path / "absent.pt")
    torch.save({"x": 1}, tmp_path / "junk.pt")
    with pytest.raises(DataError):
        pipeline.load_state(tmp_path / "junk.pt")


def test_resumed_training_matches_uninterrupted(slices, tmp_path):
    c = cfg(joint_epochs=2)
    full = train_joint(c, slices)
    half = train_joint(cfg(joint_epochs=1), slices)
    pipeline.save_state(half, tmp_path / "half.pt")
    resumed = pipeline.load_state(tmp_path / "half.pt")
    resumed.config = c
    # one more epoch from the restored optimizer / step counters
    pipeline._train_epochs(resumed, *pipeline.stack_batch(slices), 1, sampler_on=True, recon_on=True,
                           seg_on=True, lam=c.lam, stage_tag=0, optimizer=resumed.optimizer)
    assert torch.equal(resumed.prob_mask.weights, full.prob_mask.weights)
    assert same(params_of(resumed.recon), params_of(full.recon))


@pytest.mark.slow
def test_full_rate_radial_reconstruction_is_easy():
    # every k-space sample acquired: the reconstruction network only has to pass the image through
    ph = data.phantom_dataset(2, 20, 32, 32, 4, seed=4)
    split = data.make_split(ph, 0.5, seed=0)
    c = TrainConfig(mode="baseline-fixed", mask="radial", rate=1.0, image_size=32, class_count=4,
                    recon_base=16, recon_depth=1, seg_base=4, seg_depth=1, learning_rate=1e-3,
                    batch_size=4, joint_epochs=100, finetune_epochs=0, seed=0)
    state = train(c, split.train)
    assert state.binary_mask.ones_count == 32 * 32
    assert evaluate(state, split.test).mean_psnr > 40.0
