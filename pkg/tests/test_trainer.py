"""Distillation trainer: loss, schedule, clipping, determinism, resume."""

import json
import math

import numpy as np
import pytest

from tacticraft.adapter import init_adapters
from tacticraft.autodiff import Tensor
from tacticraft.errors import ConfigError, NonFiniteError, TrainAbortError
from tacticraft.gradcheck import finite_diff_check
from tacticraft.policy import PolicyConfig, init_base
from tacticraft.trainer import DEFAULT_BC_WEIGHTS, KL_PRESETS, AdamW, \
    GradClipState, TrainConfig, Trajectory, assemble_batch, base_rollout, \
    batch_indices, clip_gradients, kl_preset, load_adapters, loss_batch, lr_at, \
    train, train_step
from tests.test_policy import TINY

TWO_ACTIONS = PolicyConfig(scalar_dim=5, entity_dim=4, max_entities=3, grid=4,
                           n_action_types=2, n_delays=2, d_scalar=4, d_entity=4,
                           d_spatial=4, patch=2, skip_channels=2, d_embed=6,
                           d_hidden=5, d_core=4)


def make_traj(rng, cfg, length, category=0, replay_id="t"):
    mask = np.zeros((length, cfg.max_entities), dtype=bool)
    for t in range(length):
        mask[t, :int(rng.integers(1, cfg.max_entities + 1))] = True
    tactic = np.full(9, 0.1 / 8)
    tactic[category] = 0.9
    su = rng.random((length, cfg.max_entities)) < 0.4
    return Trajectory(
        replay_id=replay_id, category=category, tactic=tactic,
        scalar=rng.normal(size=(length, cfg.scalar_dim)),
        entities=rng.normal(size=(length, cfg.max_entities, cfg.entity_dim)),
        entity_mask=mask,
        spatial=rng.random((length, cfg.grid, cfg.grid)),
        action_type=rng.integers(0, cfg.n_action_types, length),
        delay=rng.integers(0, cfg.n_delays, length),
        queued=rng.integers(0, 2, length),
        selected_units=su & mask,
        target_unit=np.array([rng.choice(np.where(mask[t])[0])
                              for t in range(length)]),
        location=rng.integers(0, cfg.grid_cells, length))


def make_dataset(seed, cfg, n, length):
    rng = np.random.default_rng(seed)
    return [make_traj(rng, cfg, length, category=i % 9, replay_id=f"t{i}")
            for i in range(n)]


def zero_base(cfg):
    base = init_base(0, cfg)
    for t in base.tensors.values():
        t.data = np.zeros_like(t.data)
    return base


# --- presets and config --------------------------------------------------------

def test_presets_match_published_tables():
    assert KL_PRESETS["A"] == {h: 1.0 for h in KL_PRESETS["A"]}
    assert KL_PRESETS["B"]["action_type"] == 10.0
    assert KL_PRESETS["B"]["location"] == 0.0
    assert KL_PRESETS["B"]["selected_units"] == 3.0
    assert KL_PRESETS["C"]["delay"] == 1.0
    assert KL_PRESETS["C"]["target_unit"] == 10.0
    assert all(v == 100.0 for v in KL_PRESETS["D"].values())
    with pytest.raises(ConfigError):
        kl_preset("E")


def test_config_canonicalizes_target_location():
    cfg = TrainConfig(kl_head_weights={"target_location": 2.5},
                      bc_head_weights={"target_location": 8.0})
    assert cfg.kl_weight("location") == 2.5
    assert cfg.bc_weight("location") == 8.0


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(kl_head_weights={"action_type": -1.0})
    with pytest.raises(ConfigError):
        TrainConfig(warm_up_steps=10, total_steps=5)
    with pytest.raises(ConfigError):
        TrainConfig(grad_clip_kind="nope")
    with pytest.raises(ConfigError):
        TrainConfig(kl_direction="sideways")


def test_default_bc_weights():
    assert DEFAULT_BC_WEIGHTS["action_type"] == 30.0
    assert DEFAULT_BC_WEIGHTS["delay"] == 9.0
    assert DEFAULT_BC_WEIGHTS["location"] == 8.0


# --- loss ------------------------------------------------------------------------

def _single_step_batch(cfg, target_action=0):
    rng = np.random.default_rng(0)
    traj = make_traj(rng, cfg, length=1)
    traj.action_type[:] = target_action
    return assemble_batch([traj])


def test_loss_closed_form_single_head_two_actions():
    """Hand-evaluated CE + KL on a两-way head with known logits."""
    cfg_p = TWO_ACTIONS
    base = zero_base(cfg_p)                       # teacher logits [0, 0]
    adapters = init_adapters(cfg_p, 1, active=("action_type",))
    adapters.params["action_type"].b_out.data = np.array([math.log(3.0), 0.0])
    tcfg = TrainConfig(
        kl_head_weights={"action_type": 3.0, "delay": 0, "queued": 0,
                         "selected_units": 0, "target_unit": 0, "location": 0},
        bc_head_weights={"action_type": 2.0, "delay": 0, "queued": 0,
                         "selected_units": 0, "target_unit": 0, "location": 0},
        warm_up_steps=0, total_steps=1, batch_size=1, trajectory_length=1)
    batch = _single_step_batch(cfg_p, target_action=0)
    result = loss_batch(batch, base, adapters, tcfg)

    # student: softmax([ln 3, 0]) = [0.75, 0.25]; teacher uniform
    ce = -math.log(0.75)
    kl = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    expected = 2.0 * ce + 3.0 * kl
    assert result.total == pytest.approx(expected, abs=1e-10)
    assert result.bc["action_type"] == pytest.approx(ce, abs=1e-12)
    assert result.kl["action_type"] == pytest.approx(kl, abs=1e-12)


def test_zero_init_adapters_kl_exactly_zero_loss_is_pure_bc():
    base = init_base(3, TINY)
    adapters = init_adapters(TINY, 4)
    batch = assemble_batch(make_dataset(5, TINY, 3, 2))
    tcfg = TrainConfig(warm_up_steps=0, total_steps=1, batch_size=3,
                       trajectory_length=2)
    result = loss_batch(batch, base, adapters, tcfg)
    for head, value in result.kl.items():
        assert value == 0.0, head
    bc_only = sum(tcfg.bc_weight(h) * result.bc[h] for h in result.bc)
    assert result.total == pytest.approx(bc_only, rel=1e-12)


def test_alpha_zero_loss_equals_bc_for_any_adapters():
    rng = np.random.default_rng(6)
    base = init_base(7, TINY)
    adapters = init_adapters(TINY, 8)
    for p in adapters.params.values():
        p.w_out.data = rng.normal(size=p.w_out.shape) * 0.2
    batch = assemble_batch(make_dataset(9, TINY, 2, 2))
    tcfg = TrainConfig(kl_head_weights={h: 0.0 for h in KL_PRESETS["A"]},
                       warm_up_steps=0, total_steps=1)
    result = loss_batch(batch, base, adapters, tcfg)
    bc_only = sum(tcfg.bc_weight(h) * result.bc[h] for h in result.bc)
    assert result.total == pytest.approx(bc_only, rel=1e-12)


def test_loss_with_precomputed_rollout_identical():
    base = init_base(10, TINY)
    adapters = init_adapters(TINY, 11)
    adapters.params["location"].w_out.data += 0.05
    batch = assemble_batch(make_dataset(12, TINY, 2, 3))
    tcfg = TrainConfig(warm_up_steps=0, total_steps=1, trajectory_length=3)
    direct = loss_batch(batch, base, adapters, tcfg)
    rollout = base_rollout(base, batch.obs, batch.batch_size, batch.length)
    cached = loss_batch(batch, base, adapters, tcfg, rollout=rollout)
    assert direct.total == cached.total
    assert direct.bc == cached.bc and direct.kl == cached.kl


def test_loss_gradients_match_finite_differences_mini():
    # B=2, L=2 miniature: every adapter tensor against central differences
    base = init_base(13, TINY)
    adapters = init_adapters(TINY, 14)
    rng = np.random.default_rng(15)
    for p in adapters.params.values():
        p.w_out.data = rng.normal(size=p.w_out.shape) * 0.1
        p.b_out.data = rng.normal(size=p.b_out.shape) * 0.1
    batch = assemble_batch(make_dataset(16, TINY, 2, 2))
    tcfg = TrainConfig(warm_up_steps=0, total_steps=1, trajectory_length=2)
    rollout = base_rollout(base, batch.obs, batch.batch_size, batch.length)

    def f():
        return loss_batch(batch, base, adapters, tcfg, rollout=rollout).loss

    # gradient coords below |loss|*eps_machine/(eps*tol) sit beneath what
    # central differences can resolve; compare those against the floor
    floor = abs(float(f().data)) * 2.3e-16 / (1e-5 * 1e-4)
    report = finite_diff_check(f, adapters.trainable_tensors(),
                               max_coords_per_tensor=20,
                               rng=np.random.default_rng(1), rel_floor=floor)
    assert report.passed, str(report)


def test_reverse_kl_direction_differs_and_trains():
    base = init_base(17, TINY)
    adapters = init_adapters(TINY, 18)
    rng = np.random.default_rng(19)
    for p in adapters.params.values():
        p.w_out.data = rng.normal(size=p.w_out.shape) * 0.2
    batch = assemble_batch(make_dataset(20, TINY, 2, 2))
    fwd = loss_batch(batch, base, adapters,
                     TrainConfig(warm_up_steps=0, total_steps=1))
    rev_cfg = TrainConfig(warm_up_steps=0, total_steps=1, kl_direction="reverse")
    rev = loss_batch(batch, base, adapters, rev_cfg)
    assert fwd.kl["action_type"] != rev.kl["action_type"]
    rev.loss.backward()
    assert np.abs(adapters.params["action_type"].w_out.grad).max() > 0


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_nonfinite_loss_names_the_head():
    base = init_base(21, TINY)
    adapters = init_adapters(TINY, 22)
    # poison one cell only (poisoning all of them would cancel out through
    # the shift-invariant softmax); cross-entropy at that target overflows
    adapters.params["location"].b_out.data[0] = -1.5e308
    dataset = make_dataset(23, TINY, 1, 1)
    dataset[0].location[:] = 0
    batch = assemble_batch(dataset)
    tcfg = TrainConfig(warm_up_steps=0, total_steps=1)
    with pytest.raises(NonFiniteError) as err:
        loss_batch(batch, base, adapters, tcfg)
    assert "location" in str(err.value)


# --- schedule ----------------------------------------------------------------------

def test_lr_warmup_boundaries():
    cfg = TrainConfig(learning_rate=0.001, warm_up_steps=20000,
                      total_steps=100000, lr_decay=1.0, lr_decay_interval=10000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(20000, cfg) == pytest.approx(0.001)
    assert lr_at(60000, cfg) == pytest.approx(0.001)
    assert lr_at(10000, cfg) == pytest.approx(0.0005)


def test_lr_decay_applies_per_interval():
    cfg = TrainConfig(learning_rate=0.01, warm_up_steps=0, total_steps=3000,
                      lr_decay=0.5, lr_decay_interval=1000)
    assert lr_at(999, cfg) == pytest.approx(0.01)
    assert lr_at(1000, cfg) == pytest.approx(0.005)
    assert lr_at(2500, cfg) == pytest.approx(0.0025)


# --- clipping ----------------------------------------------------------------------

def _grad_holder(vec):
    t = Tensor(np.zeros(len(vec)), requires_grad=True)
    t.grad = np.array(vec, dtype=np.float64)
    return {"g": t}


def test_global_norm_below_threshold_unchanged():
    cfg = TrainConfig(grad_clip_kind="global_norm", grad_clip_threshold=1.4)
    tensors = _grad_holder([0.7, 0.0])
    norm, scale = clip_gradients(tensors, GradClipState(), cfg)
    assert (norm, scale) == (0.7, 1.0)
    assert np.array_equal(tensors["g"].grad, [0.7, 0.0])


def test_global_norm_scales_by_half_exactly():
    cfg = TrainConfig(grad_clip_kind="global_norm", grad_clip_threshold=1.4)
    tensors = _grad_holder([2.8, 0.0])
    norm, scale = clip_gradients(tensors, GradClipState(), cfg)
    assert norm == 2.8
    assert scale == 0.5
    assert np.array_equal(tensors["g"].grad, [1.4, 0.0])


@pytest.mark.parametrize("threshold,expected_tail", [(1.4, 1.0), (0.5, 0.5)])
def test_momentum_norm_matches_scripted_oracle(threshold, expected_tail):
    cfg = TrainConfig(grad_clip_kind="momentum_norm",
                      grad_clip_threshold=threshold)
    norms = [3.0, 1.0, 2.0, 2.0] + [2.0] * 1200
    state = GradClipState()
    ema = None
    for n in norms:
        tensors = _grad_holder([n])
        _, scale = clip_gradients(tensors, state, cfg)
        # scripted reference: update EMA first (init to first norm), then scale
        ema = n if ema is None else 0.99 * ema + 0.01 * n
        expected = min(1.0, threshold * ema / n)
        assert scale == pytest.approx(expected, rel=1e-12)
    # constant stream: EMA converges to the norm, scale to min(1, threshold)
    assert scale == pytest.approx(expected_tail, rel=1e-4)


def test_zero_gradient_no_scaling():
    cfg = TrainConfig(grad_clip_kind="global_norm", grad_clip_threshold=1.4)
    norm, scale = clip_gradients(_grad_holder([0.0]), GradClipState(), cfg)
    assert (norm, scale) == (0.0, 1.0)


# --- train_step / train --------------------------------------------------------------

def _mini_cfg(**kw):
    defaults = dict(learning_rate=0.005, warm_up_steps=2, total_steps=20,
                    batch_size=4, trajectory_length=2, save_ckpt_freq=0, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_base_params_bit_identical_after_steps(tmp_path):
    base = init_base(30, TINY)
    before = {k: t.data.tobytes() for k, t in base.tensors.items()}
    dataset = make_dataset(31, TINY, 8, 2)
    train(dataset, base, _mini_cfg(), str(tmp_path / "run"))
    after = {k: t.data.tobytes() for k, t in base.tensors.items()}
    assert before == after


def test_metrics_stream_deterministic(tmp_path):
    base = init_base(32, TINY)
    dataset = make_dataset(33, TINY, 8, 2)
    train(dataset, base, _mini_cfg(), str(tmp_path / "a"))
    train(dataset, base, _mini_cfg(), str(tmp_path / "b"))
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_loss_decreases_over_200_steps(tmp_path):
    base = init_base(34, TINY)
    dataset = make_dataset(35, TINY, 36, 2)
    cfg = _mini_cfg(total_steps=200, warm_up_steps=40, learning_rate=0.003)
    _, metrics = train(dataset, base, cfg, str(tmp_path / "run"))
    assert metrics[-1]["loss"] < metrics[0]["loss"]


def test_checkpoints_written_at_frequency(tmp_path):
    base = init_base(36, TINY)
    dataset = make_dataset(37, TINY, 8, 2)
    cfg = _mini_cfg(total_steps=30, save_ckpt_freq=10)
    train(dataset, base, cfg, str(tmp_path / "run"))
    ckpts = sorted((tmp_path / "run" / "checkpoints").iterdir())
    assert [c.name for c in ckpts] == ["step_0000010", "step_0000020",
                                       "step_0000030"]


def test_resume_reproduces_uninterrupted_metrics(tmp_path):
    dataset = make_dataset(38, TINY, 8, 2)
    full_cfg = _mini_cfg(total_steps=24, save_ckpt_freq=8)
    base = init_base(39, TINY)
    train(dataset, base, full_cfg, str(tmp_path / "full"))
    full_lines = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()

    half_cfg = _mini_cfg(total_steps=16, save_ckpt_freq=8)
    train(dataset, base, half_cfg, str(tmp_path / "half"))
    resume_ckpt = tmp_path / "half" / "checkpoints" / "step_0000016"
    _, tail = train(dataset, base, full_cfg, str(tmp_path / "resumed"),
                    resume_from=str(resume_ckpt))
    tail_lines = (tmp_path / "resumed" / "metrics.jsonl").read_text().splitlines()
    assert tail_lines == full_lines[16:24]
    assert [m["step"] for m in tail] == list(range(17, 25))


def test_adapter_checkpoint_reload_matches(tmp_path):
    base = init_base(40, TINY)
    dataset = make_dataset(41, TINY, 8, 2)
    cfg = _mini_cfg(total_steps=10, save_ckpt_freq=10)
    adapters, _ = train(dataset, base, cfg, str(tmp_path / "run"))
    ckpt = tmp_path / "run" / "checkpoints" / "step_0000010"
    loaded = load_adapters(str(ckpt), TINY)
    for name, t in adapters.all_tensors().items():
        reloaded = loaded.all_tensors()[name]
        assert np.array_equal(reloaded.data,
                              t.data.astype(np.float32).astype(np.float64))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_train_aborts_with_last_checkpoint_on_nonfinite(tmp_path):
    base = init_base(42, TINY)
    dataset = make_dataset(43, TINY, 8, 2)
    for traj in dataset:
        traj.location[:] = 0
    cfg = _mini_cfg(total_steps=20, save_ckpt_freq=5)
    adapters = init_adapters(TINY, 44)
    adapters.params["location"].b_out.data[0] = -1.5e308
    with pytest.raises(TrainAbortError) as err:
        train(dataset, base, cfg, str(tmp_path / "run"), adapters=adapters)
    assert "location" in str(err.value)


def test_batch_indices_pure_function():
    a = batch_indices(7, 3, 100, 8)
    b = batch_indices(7, 3, 100, 8)
    c = batch_indices(7, 4, 100, 8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_train_step_metrics_shape():
    base = init_base(45, TINY)
    dataset = make_dataset(46, TINY, 4, 2)
    cfg = _mini_cfg()
    adapters = init_adapters(TINY, 47)
    opt = AdamW(adapters.trainable_tensors(), weight_decay=cfg.weight_decay)
    record = train_step(assemble_batch(dataset[:2]), base, adapters, opt,
                        GradClipState(), cfg, step=1)
    assert set(record) == {"step", "lr", "loss", "grad_norm", "clip_scale",
                           "bc", "kl"}
    assert json.dumps(record, sort_keys=True)
