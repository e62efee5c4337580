import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrnp.autodiff import ContractError, NumericError, Parameter, ShapeError, Tape, backward
from cdrnp.model import GaussianLatent, TaskLatents, forward_task
from cdrnp.training import (
    AdamState,
    TrainLog,
    TrainingError,
    auxiliary_source_loss,
    init_params,
    kl_diag_gaussian,
    load_checkpoint,
    optimizer_step,
    task_loss,
    train,
)


def _kl(mu_q, ls_q, mu_p, ls_p):
    tape = Tape()
    q = GaussianLatent(tape.const(mu_q), tape.const(ls_q))
    p = GaussianLatent(tape.const(mu_p), tape.const(ls_p))
    return float(kl_diag_gaussian(tape, q, p).value)


def test_kl_identical_is_zero():
    assert _kl(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3)) == 0.0


def test_kl_mean_shift():
    assert abs(_kl([1.0], [0.0], [0.0], [0.0]) - 0.5) <= 1e-12


def test_kl_wider_q():
    assert abs(_kl([0.0], [math.log(2.0)], [0.0], [0.0]) - (1.5 - math.log(2.0))) <= 1e-12


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        _kl([0.0], [0.0], [0.0, 1.0], [0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_matches_monte_carlo_formula(seed):
    # closed form against the textbook per-dimension expression
    rng = np.random.default_rng(seed)
    mq, mp = rng.normal(size=3), rng.normal(size=3)
    sq, sp = rng.uniform(0.2, 3, size=3), rng.uniform(0.2, 3, size=3)
    ref = np.sum(np.log(sp / sq) + (sq**2 + (mq - mp) ** 2) / (2 * sp**2) - 0.5)
    got = _kl(mq, np.log(sq), mp, np.log(sp))
    assert got >= 0
    assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))


def _latents(tape, mu_q, mu_p):
    prior = GaussianLatent(tape.const(mu_p), tape.const(np.zeros(len(mu_p))))
    post = GaussianLatent(tape.const(mu_q), tape.const(np.zeros(len(mu_q))))
    return TaskLatents(prior, post, post.mu, None, np.zeros(len(mu_q)))


def test_task_loss_perfect_predictions():
    tape = Tape()
    lat = _latents(tape, [1.0, 0.0], [0.0, 0.0])
    total, rec, kl = task_loss(tape, tape.const([3.0, 4.0]), [3.0, 4.0], lat, 0.3)
    assert float(rec.value) == 0.0
    assert abs(float(total.value) - 0.3 * 0.5) <= 1e-15


def test_task_loss_equal_latents():
    tape = Tape()
    lat = _latents(tape, [0.2, 0.1], [0.2, 0.1])
    total, rec, kl = task_loss(tape, tape.const([3.0, 4.0]), [4.0, 4.0], lat, 0.9)
    assert float(kl.value) == 0.0
    assert float(total.value) == float(rec.value) == 0.5


def test_task_loss_lambda_zero():
    tape = Tape()
    lat = _latents(tape, [5.0], [0.0])
    total, rec, _ = task_loss(tape, tape.const([1.0]), [2.0], lat, 0.0)
    assert float(total.value) == float(rec.value)


def test_task_loss_needs_posterior():
    tape = Tape()
    lat = _latents(tape, [0.0], [0.0])
    lat.posterior = None
    with pytest.raises(ContractError):
        task_loss(tape, tape.const([1.0]), [2.0], lat, 0.1)


def test_lambda_zero_gradients_equal_reconstruction_only(tiny_model, tiny_cfg):
    builder, params = tiny_model
    task = builder.build_training_task(np.random.default_rng(0))
    grads = []
    for use_total in (True, False):
        tape = Tape()
        preds, lat = forward_task(tape, task, params, "training", np.random.default_rng(1), tiny_cfg)
        total, rec, _ = task_loss(tape, preds, [e.rating for e in task.query], lat, 0.0)
        backward(tape, total if use_total else rec)
        grads.append({p.name: p.grad.copy() for p in params})
        params.zero_grad()
    for name in grads[0]:
        np.testing.assert_array_equal(grads[0][name], grads[1][name])


def test_aux_loss_zero_when_head_exact(tiny_model):
    builder, params = tiny_model
    params = params.copy()
    params["aux.W1"].value[...] = 0.0
    params["aux.b1"].value[...] = 3.0
    tape = Tape()
    loss = auxiliary_source_loss(tape, [0, 1, 2], [0, 1, 2], [3.0, 3.0, 3.0], params)
    assert float(loss.value) == 0.0


def test_aux_weight_zero_adds_nothing(tiny_data, tiny_cfg):
    source, target, _, split = tiny_data
    cfg = replace(tiny_cfg, aux_weight=0.0, epochs=1, tasks_per_epoch=3)
    _, log = train(cfg, split, source, target)
    assert log.epochs[0].aux_loss == 0.0


def test_aux_loss_decreases_with_training(tiny_cfg):
    from cdrnp.config import SynthConfig
    from cdrnp.synthetic import generate_synthetic

    source, target, _ = generate_synthetic(SynthConfig(n_users=50, n_src_items=30, n_tgt_items=30,
                                                       ratings_per_user=10, seed=0))
    params = init_params(tiny_cfg, source, target)
    rng = np.random.default_rng(0)
    state = AdamState()
    everything = (source.users, source.items, source.ratings)

    def full_loss():
        return float(auxiliary_source_loss(Tape(), *everything, params).value)

    start = full_loss()
    for _ in range(200):
        pick = rng.integers(0, len(source), size=32)
        tape = Tape()
        loss = auxiliary_source_loss(tape, source.users[pick], source.items[pick], source.ratings[pick], params)
        backward(tape, loss)
        optimizer_step(params, state, 0.01)
    assert full_loss() < start


def test_adam_zero_gradient_keeps_params():
    p = Parameter("p", [1.0, -2.0])
    from cdrnp.model import ModelParams

    params = ModelParams([p], 1, 1, 1)
    optimizer_step(params, AdamState(), 0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    from cdrnp.model import ModelParams

    p = Parameter("p", [1.0, -2.0, 0.5])
    params = ModelParams([p], 1, 1, 1)
    p.grad[...] = [3.0, -0.1, 20.0]
    optimizer_step(params, AdamState(), 0.01)
    np.testing.assert_allclose(p.value - [1.0, -2.0, 0.5], [-0.01, 0.01, -0.01], rtol=1e-6)
    np.testing.assert_array_equal(p.grad, 0.0)


def test_adam_trajectories_reproducible():
    from cdrnp.model import ModelParams

    def run():
        p = Parameter("p", [0.0, 0.0])
        params, state = ModelParams([p], 1, 1, 1), AdamState()
        for g in ([1.0, 2.0], [-0.5, 0.1], [0.3, 0.3]):
            p.grad[...] = g
            optimizer_step(params, state, 0.05)
        return p.value.tobytes()

    assert run() == run()


def test_adam_rejects_non_finite():
    from cdrnp.model import ModelParams

    p = Parameter("p", [0.0])
    p.grad[...] = np.nan
    with pytest.raises(NumericError):
        optimizer_step(ModelParams([p], 1, 1, 1), AdamState(), 0.1)


def test_train_writes_one_record_per_epoch(tmp_path, tiny_data, tiny_cfg):
    source, target, _, split = tiny_data
    cfg = replace(tiny_cfg, epochs=10, tasks_per_epoch=2)
    params, log = train(cfg, split, source, target, out_dir=tmp_path)
    assert len(log.epochs) == 10
    assert [r.epoch for r in TrainLog.read(tmp_path / "trainlog.jsonl").epochs] == list(range(1, 11))
    assert (tmp_path / "final.ckpt").exists() and (tmp_path / "epoch010.ckpt").exists()
    for r in log.epochs:
        assert all(math.isfinite(x) for x in (r.rec_loss, r.kl_loss, r.aux_loss))


def test_train_deterministic_checkpoints(tmp_path, tiny_data, tiny_cfg):
    source, target, _, split = tiny_data
    train(tiny_cfg, split, source, target, out_dir=tmp_path / "a", meta={"config_hash": "x"})
    train(tiny_cfg, split, source, target, out_dir=tmp_path / "b", meta={"config_hash": "x"})
    assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()


def test_checkpoint_keeps_adam_state(tmp_path, tiny_data, tiny_cfg):
    source, target, _, split = tiny_data
    train(tiny_cfg, split, source, target, out_dir=tmp_path)
    params, meta, adam = load_checkpoint(tmp_path / "final.ckpt")
    assert meta["epoch"] == tiny_cfg.epochs
    assert adam.step == tiny_cfg.epochs * tiny_cfg.tasks_per_epoch
    assert set(adam.m) == set(params.names())


def test_parallel_workers_match_serial_sum(tiny_data, tiny_cfg):
    source, target, _, split = tiny_data
    cfg = replace(tiny_cfg, workers=2, epochs=1, tasks_per_epoch=4)
    p1, _ = train(cfg, split, source, target)
    p2, _ = train(cfg, split, source, target)
    assert p1.checksum() == p2.checksum()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny_data, tiny_cfg):
    source, target, _, split = tiny_data
    params = init_params(tiny_cfg, source, target)
    params["out.b"].value[...] = 1e300
    with pytest.raises((TrainingError, NumericError)):
        train(tiny_cfg, split, source, target, params=params)


def test_resume_after_interruption_matches_uninterrupted_run(tmp_path, tiny_data, tiny_cfg):
    source, target, _, split = tiny_data
    cfg = replace(tiny_cfg, epochs=3, tasks_per_epoch=3)
    train(cfg, split, source, target, out_dir=tmp_path / "full")
    cut = tmp_path / "cut"
    train(cfg, split, source, target, out_dir=cut)
    (cut / "epoch003.ckpt").unlink()
    (cut / "final.ckpt").unlink()
    _, log = train(cfg, split, source, target, out_dir=cut, resume=True)
    assert [r.epoch for r in log.epochs] == [1, 2, 3]
    assert (cut / "final.ckpt").read_bytes() == (tmp_path / "full/final.ckpt").read_bytes()


def test_resume_with_empty_dir_starts_fresh(tmp_path, tiny_data, tiny_cfg):
    source, target, _, split = tiny_data
    a, _ = train(tiny_cfg, split, source, target, out_dir=tmp_path, resume=True)
    b, _ = train(tiny_cfg, split, source, target)
    assert a.checksum() == b.checksum()
