import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dmicro.config import ExperimentConfig
from dmicro.data import ImageDataset, SegDataset
from dmicro.tensor import Tensor, backward
from dmicro.tensor.io import FormatError, load_archive, save_archive
from dmicro.trainer import (
    LOG_COLUMNS,
    Adam,
    DivergenceError,
    Microscope,
    MSchedule,
    OptimState,
    PlateauDetector,
    adam_step,
    clip_global_norm,
    evaluate,
    l1_loss,
    load_checkpoint,
    save_checkpoint,
    seed_streams,
    train_content,
    train_segmentation,
    update_m,
)

from oracles import adam_scalar

TINY = dict(T=2, P=16, n=4, widths=(4, 4, 4, 4, 4), batch=4, epochs=4, epoch_baseline=1, epoch_cutoff=2,
            epoch_step=1, checkpoint_every=0, augment=False)


def tiny_data(n_train=8, n_val=4, seed=0):
    rng = np.random.default_rng(seed)
    return {"train": ImageDataset("train", rng.random((n_train, 16, 16))),
            "val": ImageDataset("val", rng.random((n_val, 16, 16)))}


# -- m schedule ------------------------------------------------------------------

PAPER = MSchedule(12150, 18630, 810)


def test_schedule_paper_constants():
    assert update_m(12000, PAPER) == (1, False)
    assert update_m(12151, PAPER) == (1, True)
    assert update_m(18630, PAPER) == (1, True)
    assert update_m(18630 + 810, PAPER) == (2, True)
    assert update_m(18630 + 10 * 810, PAPER) == (11, True)


def test_schedule_degenerate_counts_from_one():
    sched = MSchedule(0, 0, 1)
    assert update_m(0, sched) == (1, False)
    # epoch e past a zero cutoff with unit step: 1 + e
    for e in range(1, 20):
        assert update_m(e, sched) == (1 + e, True)


def test_schedule_errors():
    with pytest.raises(ValueError):
        update_m(5, MSchedule(0, 2, 0))
    assert update_m(2, MSchedule(0, 2, 0)) == (1, True)
    with pytest.raises(ValueError):
        update_m(-1, PAPER)
    with pytest.raises(ValueError):
        MSchedule(5, 4, 1)


@given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 10))
def test_schedule_properties(b, extra, step):
    sched = MSchedule(b, b + extra, step)
    prev = 1
    for e in range(0, b + extra + 5 * step + 2):
        m, joint = update_m(e, sched)
        assert joint == (e > b)
        assert m >= 1 and m - prev in (0, 1)
        if e <= b + extra:
            assert m == 1
        prev = m
    # exhaustive agreement with the closed form
    for e in range(0, b + extra + 3 * step):
        m, _ = update_m(e, sched)
        want = 1 + max(0, (e - sched.epoch_cutoff) // step) if e > b and e > b + extra else 1
        assert m == want


def test_schedule_advance_tracks_m():
    s = MSchedule(0, 1, 2)
    assert s.advance(5) == (3, True) and s.m_current == 3


def test_desk_schedule_final_slope():
    assert update_m(600, MSchedule(300, 450, 25)) == (7, True)


# -- losses ----------------------------------------------------------------------

def test_l1_loss_values_and_gradient():
    x = np.linspace(0, 1, 12).reshape(3, 4)
    assert l1_loss(Tensor(x), Tensor(x)).item() == 0.0
    assert l1_loss(Tensor(x + 0.1), Tensor(x)).item() == pytest.approx(0.1)
    a = Tensor(x + np.array([0.2, -0.3, 0.0, 0.1]), requires_grad=True)
    backward(l1_loss(a, Tensor(x)))
    np.testing.assert_array_equal(a.grad, np.tile([1.0, -1.0, 0.0, 1.0], (3, 1)) / 12)
    with pytest.raises(ValueError):
        l1_loss(Tensor(x), Tensor(x.T))


# -- Adam ------------------------------------------------------------------------

def test_adam_matches_scalar_oracle():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    p = Tensor(np.array([0.4]), requires_grad=True)
    state = OptimState(lr=0.01)
    for g in grads:
        adam_step([p], [np.array([g])], state)
    assert abs(p.data[0] - adam_scalar(0.4, grads, 0.01)) < 1e-12


def test_adam_first_step_is_sign_sized():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    adam_step([p], [np.array([3.0, -0.5])], OptimState(lr=0.1))
    # t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [-0.1 * 3 / (3 + 1e-8), 0.1 * 0.5 / (0.5 + 1e-8)], rtol=1e-12)


def test_adam_zero_grad_and_missing_grad():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    adam_step([p], [np.zeros(2)], OptimState(lr=1.0))
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    with pytest.raises(ValueError):
        adam_step([p], [None], OptimState(lr=1.0))
    with pytest.raises(ValueError):
        Adam([Tensor(np.ones(2))], lr=0.1).step()


def test_clip_global_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad[:] = [3.0, 0.0]
    b.grad[:] = [4.0]
    assert clip_global_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    clip_global_norm([a, b], 10.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])


def test_plateau_detector():
    det = PlateauDetector(patience=3, delta=0.1)
    values = [1.0, 0.8, 0.75, 0.72, 0.71]
    assert [det.update(v) for v in values] == [False, False, False, False, True]


def test_seed_streams_are_independent_and_reproducible():
    a, b = seed_streams(3), seed_streams(3)
    for k in a:
        assert a[k].integers(1 << 30) == b[k].integers(1 << 30)
    draws = [seed_streams(3)[k].integers(1 << 30) for k in a]
    assert len(set(draws)) == len(draws)


# -- training --------------------------------------------------------------------

def test_single_image_overfit_is_monotone():
    cfg = ExperimentConfig(**{**TINY, "noise": False, "scheme": "random"})
    model = Microscope(cfg, dtype=np.float64)
    X = Tensor(np.random.default_rng(1).random((1, 1, 16, 16)))
    opt = Adam(model.inverse.parameters(), lr=1e-4)
    losses = []
    for _ in range(50):
        loss = l1_loss(model.reconstruct(X, None), X)
        losses.append(loss.item())
        opt.zero_grad()
        backward(loss)
        opt.step()
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_train_content_logs_and_phases(tmp_path):
    cfg = ExperimentConfig(**TINY)
    res = train_content(cfg, tiny_data(), tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS)
    rows = [r.split(",") for r in lines[1:]]
    assert [r[1] for r in rows] == ["inverse", "joint", "joint", "joint"]
    assert [int(r[2]) for r in rows] == [1, 1, 2, 3]
    assert res.checkpoint == tmp_path / "final.dtns" and res.checkpoint.exists()
    assert res.model.m == 3


def test_fixed_scheme_keeps_patterns(tmp_path):
    cfg = ExperimentConfig(**{**TINY, "scheme": "random"})
    model = Microscope(cfg)
    before = model.pattern_array()
    inv_before = {k: v.copy() for k, v in model.inverse.state_dict().items()}
    train_content(cfg, tiny_data(), model=model)
    np.testing.assert_array_equal(model.pattern_array(), before)
    assert any(not np.array_equal(v, model.inverse.state_dict()[k]) for k, v in inv_before.items())


def test_learned_patterns_frozen_in_inverse_phase():
    cfg = ExperimentConfig(**{**TINY, "epochs": 1})
    model = Microscope(cfg)
    W = model.bank.W.real.data.copy()
    train_content(cfg, tiny_data(), model=model)
    np.testing.assert_array_equal(model.bank.W.real.data, W)
    cfg2 = cfg.replace(epochs=2)
    model2 = Microscope(cfg2)
    train_content(cfg2, tiny_data(), model=model2)
    assert not np.array_equal(model2.bank.W.real.data, W)


def test_bit_reproducible_without_noise(tmp_path):
    cfg = ExperimentConfig(**{**TINY, "noise": False, "augment": True})
    a = train_content(cfg, tiny_data(), tmp_path / "a").model.state_dict()
    b = train_content(cfg, tiny_data(), tmp_path / "b").model.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_divergence_guard():
    cfg = ExperimentConfig(**{**TINY, "epochs": 1})
    data = tiny_data()
    data["train"].items[0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train_content(cfg, data)


def test_plateau_starts_joint_phase_early():
    cfg = ExperimentConfig(**{**TINY, "epochs": 6, "epoch_baseline": 4, "epoch_cutoff": 5, "plateau": True,
                              "plateau_patience": 1, "plateau_delta": 10.0})
    res = train_content(cfg, tiny_data())
    phases = [r["phase"] for r in res.log.rows]
    # epoch 1 sets the best value, epoch 2 is the first stale one
    assert res.baseline_epoch == 2
    assert phases == ["inverse", "inverse", "joint", "joint", "joint", "joint"]
    # the cutoff keeps its distance from the shifted baseline
    assert [r["m"] for r in res.log.rows] == [1, 1, 1, 2, 3, 4]


# -- checkpoints -----------------------------------------------------------------

@pytest.mark.parametrize("scheme,domain", [("learned", "frequency"), ("learned", "spatial"), ("hadamard", "frequency")])
def test_checkpoint_roundtrip(tmp_path, scheme, domain):
    cfg = ExperimentConfig(**{**TINY, "scheme": scheme, "pattern_domain": domain})
    model = Microscope(cfg)
    model.set_m(4.0)
    save_checkpoint(tmp_path / "c.dtns", model, cfg)
    back, meta = load_checkpoint(tmp_path / "c.dtns")
    assert meta["compression"] == "8" and back.m == model.m
    np.testing.assert_array_equal(back.pattern_array(), model.pattern_array())
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[k], v)


def test_checkpoint_names_are_stable(tmp_path):
    cfg = ExperimentConfig(**TINY)
    keys = set(Microscope(cfg).state_dict())
    assert {"pattern_bank.W_real", "pattern_bank.W_imag", "inverse.ups.W_loc",
            "inverse.recon.block3.conv.kernel"} <= keys


def test_checkpoint_version_mismatch(tmp_path):
    cfg = ExperimentConfig(**TINY)
    path = tmp_path / "c.dtns"
    save_checkpoint(path, Microscope(cfg), cfg)
    state, meta = load_archive(path)
    save_archive(path, state, {**meta, "format_version": 99})
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_evaluate_is_repeatable_and_restores_modes():
    cfg = ExperimentConfig(**TINY)
    model = Microscope(cfg)
    imgs = tiny_data()["val"].items
    a = evaluate(model, imgs, noise_seed=5)
    b = evaluate(model, imgs, noise_seed=5)
    assert a.l1 == b.l1 and np.array_equal(a.recon, b.recon)
    assert model.inverse.training
    model.inverse.eval()
    evaluate(model, imgs, noise_seed=5)
    assert not model.inverse.training


# -- segmentation ----------------------------------------------------------------

def tiny_seg():
    out = {}
    for split, ds in tiny_data().items():
        out[split] = SegDataset(ds, (ds.items > 0.5).astype(np.float32))
    return out


def test_segmentation_stages(tmp_path):
    cfg = ExperimentConfig(**{**TINY, "epochs": 2, "task": "segmentation", "seg_head_epochs": 2,
                              "seg_finetune_epochs": 2, "seg_width": 4})
    data = tiny_seg()
    with pytest.raises(FileNotFoundError):
        train_segmentation(cfg, data, tmp_path, stage=3)
    with pytest.raises(FileNotFoundError):
        train_segmentation(cfg, data, tmp_path, stage=2)
    paths = train_segmentation(cfg, data, tmp_path, stage=1)
    train_segmentation(cfg, data, tmp_path, stage=2)
    s1, _ = load_archive(paths["stage1"])
    s2, _ = load_archive(paths["stage2"])
    frozen = [k for k in s1 if k.startswith(("pattern_bank.", "inverse."))]
    assert frozen and all(np.array_equal(s1[k], s2[k]) for k in frozen)
    assert any(k.startswith("seg_head.") for k in s2)
    train_segmentation(cfg, data, tmp_path, stage=3)
    s3, _ = load_archive(paths["stage3"])
    assert any(not np.array_equal(s2[k], s3[k]) for k in frozen)
    model, meta = load_checkpoint(paths["stage3"])
    assert meta["stage"] == 3 and model.head is not None
