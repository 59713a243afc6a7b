"""Distillation training of adapter parameters against a frozen base.

The objective per head is weighted behavior cloning on tactic-labeled
trajectories plus a weighted KL penalty tying the conditioned head back to
the frozen base head. Only adapter tensors receive gradients; the base is
byte-identical before and after any run. Runs are deterministic given
(config, seed): batch order is a pure function of them, and checkpoints
carry a float64 sidecar so resumed runs reproduce the uninterrupted metrics
stream bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .adapter import ADAPTER_POINTS, AdapterSet, conditioned_heads, init_adapters
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NonFiniteError, TrainAbortError, ValidationError
from .policy import HEAD_NAMES, BasePolicyParams, EncoderOut, ObservationBatch, \
    PolicyOutput, core_step, encode, heads_forward
from .taxonomy import TACTIC_DIM

# KL weight presets; "target_location" is this config family's name for the
# location head.
KL_PRESETS = {
    "A": {"action_type": 1.0, "delay": 1.0, "queued": 1.0,
          "selected_units": 1.0, "target_unit": 1.0, "location": 1.0},
    "B": {"action_type": 10.0, "delay": 1.0, "queued": 10.0,
          "selected_units": 3.0, "target_unit": 1.0, "location": 0.0},
    "C": {"action_type": 10.0, "delay": 1.0, "queued": 10.0,
          "selected_units": 10.0, "target_unit": 10.0, "location": 10.0},
    "D": {"action_type": 100.0, "delay": 100.0, "queued": 100.0,
          "selected_units": 100.0, "target_unit": 100.0, "location": 100.0},
}

DEFAULT_BC_WEIGHTS = {
    "action_type": 30.0, "delay": 9.0, "queued": 1.0,
    "selected_units": 4.0, "target_unit": 4.0, "location": 8.0,
}

_HEAD_ALIASES = {"target_location": "location"}


def canonical_head(name: str) -> str:
    return _HEAD_ALIASES.get(name, name)


def kl_preset(name: str) -> dict:
    if name not in KL_PRESETS:
        raise ConfigError(f"unknown KL-weight preset {name!r} (want A|B|C|D)")
    return dict(KL_PRESETS[name])


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    warm_up_steps: int = 1000
    total_steps: int = 5000
    lr_decay: float = 1.0
    lr_decay_interval: int = 10000
    grad_clip_kind: str = "momentum_norm"   # or "global_norm"
    grad_clip_threshold: float = 1.4
    batch_size: int = 16
    trajectory_length: int = 8
    seed: int = 0
    kl_head_weights: dict = field(default_factory=lambda: kl_preset("A"))
    bc_head_weights: dict = field(default_factory=lambda: dict(DEFAULT_BC_WEIGHTS))
    kl_direction: str = "forward"           # forward: KL(base || conditioned)
    active_adapters: tuple = ADAPTER_POINTS
    fusion_method: str = "add"
    tactic_dim: int = TACTIC_DIM
    save_ckpt_freq: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.kl_head_weights = {canonical_head(k): float(v)
                                for k, v in self.kl_head_weights.items()}
        self.bc_head_weights = {canonical_head(k): float(v)
                                for k, v in self.bc_head_weights.items()}
        for table in (self.kl_head_weights, self.bc_head_weights):
            for name, w in table.items():
                if name not in HEAD_NAMES:
                    raise ConfigError(f"unknown head {name!r} in weights")
                if w < 0:
                    raise ConfigError(f"head weight {name}={w} must be >= 0")
        if self.trajectory_length < 1:
            raise ConfigError("trajectory_length must be >= 1")
        if self.warm_up_steps > self.total_steps:
            raise ConfigError("warm_up_steps cannot exceed total_steps")
        if self.grad_clip_kind not in ("global_norm", "momentum_norm"):
            raise ConfigError(f"unknown grad clip kind {self.grad_clip_kind!r}")
        if self.kl_direction not in ("forward", "reverse"):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")
        if self.grad_clip_threshold <= 0:
            raise ConfigError("grad clip threshold must be positive")

    def with_preset(self, name: str) -> "TrainConfig":
        return replace(self, kl_head_weights=kl_preset(name))

    def kl_weight(self, head: str) -> float:
        return self.kl_head_weights.get(head, 0.0)

    def bc_weight(self, head: str) -> float:
        return self.bc_head_weights.get(head, 0.0)


# --- trajectories and batches ------------------------------------------------

@dataclass
class Trajectory:
    """A fixed-length window of (observation, action) pairs with one tactic
    label, stored as stacked arrays."""

    replay_id: str
    category: int
    tactic: np.ndarray          # [tactic_dim]
    scalar: np.ndarray          # [L, scalar_dim]
    entities: np.ndarray        # [L, E, entity_dim]
    entity_mask: np.ndarray     # [L, E] bool
    spatial: np.ndarray         # [L, grid, grid]
    action_type: np.ndarray     # [L] int
    delay: np.ndarray           # [L] int
    queued: np.ndarray          # [L] int
    selected_units: np.ndarray  # [L, E] bool
    target_unit: np.ndarray     # [L] int
    location: np.ndarray        # [L] int

    @property
    def length(self) -> int:
        return self.scalar.shape[0]


@dataclass
class TrainBatch:
    """B trajectories flattened time-major to [L*B] rows (row t*B+b), so the
    recurrent core can slice contiguous per-step blocks."""

    obs: ObservationBatch
    tactic: np.ndarray           # [L*B, tactic_dim]
    targets: dict                # head -> int array [L*B] (or bool [L*B, E])
    batch_size: int
    length: int


def _flatten_tm(arr: np.ndarray) -> np.ndarray:
    """[B, L, ...] -> [L*B, ...] with row index t*B+b."""
    return np.ascontiguousarray(arr.swapaxes(0, 1)).reshape(
        (-1,) + arr.shape[2:])


def assemble_batch(trajectories) -> TrainBatch:
    lengths = {t.length for t in trajectories}
    if len(lengths) != 1:
        raise ValidationError(f"mixed trajectory lengths in batch: {lengths}")
    length = lengths.pop()
    b = len(trajectories)
    obs = ObservationBatch(
        scalar=_flatten_tm(np.stack([t.scalar for t in trajectories])),
        entities=_flatten_tm(np.stack([t.entities for t in trajectories])),
        entity_mask=_flatten_tm(np.stack([t.entity_mask for t in trajectories])),
        spatial=_flatten_tm(np.stack([t.spatial for t in trajectories])),
    )
    targets = {
        name: _flatten_tm(np.stack([getattr(t, name) for t in trajectories]))
        for name in HEAD_NAMES
    }
    tactic = np.tile(np.stack([t.tactic for t in trajectories]), (length, 1))
    return TrainBatch(obs=obs, tactic=tactic, targets=targets,
                      batch_size=b, length=length)


@dataclass
class BaseRollout:
    """Base-policy activations for one batch: encoder outputs, the stacked
    core outputs, and the unconditioned head logits (the teacher)."""

    enc: EncoderOut
    core: Tensor
    teacher: PolicyOutput


def base_rollout(base: BasePolicyParams, obs: ObservationBatch,
                 batch_size: int, length: int) -> BaseRollout:
    """Unroll the frozen core over time-major flattened observations."""
    enc = encode(obs, base)
    state = base.zero_state(batch_size)
    cores = []
    for t in range(length):
        emb_t = ad.narrow(enc.embedding, 0, t * batch_size, batch_size)
        core_t, state = core_step(emb_t, state, base)
        cores.append(core_t)
    core = cores[0] if len(cores) == 1 else ad.concat(cores, axis=0)
    teacher = heads_forward(core, enc.entity_embeddings, enc.spatial_skip,
                            enc.entity_mask, base)
    return BaseRollout(enc=enc, core=core, teacher=teacher)


# --- loss ---------------------------------------------------------------------

@dataclass
class LossResult:
    loss: Tensor
    bc: dict
    kl: dict

    @property
    def total(self) -> float:
        return float(self.loss.data)


def _masked_row_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid entities per row, then over rows."""
    counts = mask.astype(np.float64).sum(axis=-1)
    per_row = ad.mul(ad.tsum(values, axis=-1), 1.0 / counts)
    return ad.tmean(per_row)


def _head_kl(head: str, teacher: Tensor, student: Tensor, mask, direction: str):
    if direction == "forward":
        p, q, detach = teacher, student, True
    else:
        p, q, detach = student, teacher, False
    if head == "selected_units":
        kl = ad.bernoulli_kl(p, q, mask=mask, detach_p=detach)
        return _masked_row_mean(kl, mask)
    m = mask if head == "target_unit" else None
    return ad.tmean(ad.kl_categorical(p, q, mask=m, detach_p=detach))


def loss_batch(batch: TrainBatch, base: BasePolicyParams,
               adapters: AdapterSet | None, cfg: TrainConfig,
               rollout: BaseRollout | None = None) -> LossResult:
    """Per-head behavior cloning plus KL-to-base, averaged over batch x time.

    With ``adapters=None`` the behavior-cloning term is computed on the base
    outputs themselves (the pre-training path) and the KL terms are zero by
    construction, so they are skipped.
    """
    if rollout is None:
        rollout = base_rollout(base, batch.obs, batch.batch_size, batch.length)
    teacher = rollout.teacher
    mask = teacher.entity_mask
    if adapters is None:
        student = teacher
    else:
        student = conditioned_heads(rollout.core, rollout.enc, batch.tactic,
                                    base, adapters)

    terms = []
    bc_out, kl_out = {}, {}
    for head in HEAD_NAMES:
        try:
            s_logits = student.head(head)
            if head == "selected_units":
                bce = ad.bce_with_logits(
                    s_logits, batch.targets[head].astype(np.float64), mask=mask)
                bc = _masked_row_mean(bce, mask)
            else:
                m = mask if head == "target_unit" else None
                bc = ad.tmean(ad.cross_entropy(s_logits, batch.targets[head],
                                               mask=m))
            bc_out[head] = float(bc.data)
            if cfg.bc_weight(head) > 0:
                terms.append(ad.mul(bc, cfg.bc_weight(head)))
            if adapters is not None:
                kl = _head_kl(head, teacher.head(head), s_logits, mask,
                              cfg.kl_direction)
                kl_out[head] = float(kl.data)
                if cfg.kl_weight(head) > 0:
                    terms.append(ad.mul(kl, cfg.kl_weight(head)))
            else:
                kl_out[head] = 0.0
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite loss in head '{head}': {exc}") from exc

    if not terms:
        terms = [Tensor(np.zeros(()), requires_grad=False)]
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return LossResult(loss=loss, bc=bc_out, kl=kl_out)


# --- schedule, clipping, optimizer --------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then a multiplicative decay every
    ``lr_decay_interval`` steps (decay 1.0 means constant)."""
    warm = 1.0 if cfg.warm_up_steps == 0 else min(1.0, step / cfg.warm_up_steps)
    decay = cfg.lr_decay ** (step // cfg.lr_decay_interval)
    return cfg.learning_rate * warm * decay


@dataclass
class GradClipState:
    ema: float | None = None


def clip_gradients(tensors: dict, state: GradClipState, cfg: TrainConfig):
    """Scale gradients in place; returns (raw_norm, scale).

    global_norm: scale = min(1, threshold / ||g||).
    momentum_norm: the EMA of ||g|| (init: first observed norm, then
    0.99/0.01 updates) replaces the constant 1 in the numerator:
    scale = min(1, threshold * ema / ||g||).
    """
    sq = 0.0
    for t in tensors.values():
        if t.grad is not None:
            sq += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(sq))
    if cfg.grad_clip_kind == "global_norm":
        scale = 1.0 if norm == 0.0 else min(1.0, cfg.grad_clip_threshold / norm)
    else:
        state.ema = norm if state.ema is None else 0.99 * state.ema + 0.01 * norm
        scale = 1.0 if norm == 0.0 else min(
            1.0, cfg.grad_clip_threshold * state.ema / norm)
    if scale != 1.0:
        for t in tensors.values():
            if t.grad is not None:
                t.grad *= scale
    return norm, scale


class AdamW:
    """Adam with decoupled weight decay over a named tensor dict."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.step_count = 0

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data = t.data - lr * update

    def state_arrays(self) -> dict:
        out = {"adam.step": np.array(float(self.step_count))}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict):
        self.step_count = int(arrays["adam.step"])
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])


# --- the training loop ----------------------------------------------------------

STATE_FILE = "state.npz"


def train_step(batch: TrainBatch, base: BasePolicyParams, adapters: AdapterSet,
               opt: AdamW, clip_state: GradClipState, cfg: TrainConfig,
               step: int, rollout: BaseRollout | None = None) -> dict:
    """One optimizer update on adapter parameters only."""
    opt.zero_grad()
    result = loss_batch(batch, base, adapters, cfg, rollout=rollout)
    result.loss.backward()
    norm, scale = clip_gradients(opt.params, clip_state, cfg)
    lr = lr_at(step, cfg)
    opt.step(lr)
    return {
        "step": step,
        "lr": lr,
        "loss": result.total,
        "grad_norm": norm,
        "clip_scale": scale,
        "bc": {k: result.bc[k] for k in HEAD_NAMES},
        "kl": {k: result.kl[k] for k in HEAD_NAMES},
    }


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Deterministic batch composition: a pure function of (seed, step)."""
    rng = np.random.default_rng((seed, 1, step))
    return rng.integers(0, n, size=batch_size)


def save_train_state(directory: str, adapters: AdapterSet, opt: AdamW,
                     clip_state: GradClipState, step: int):
    """Interchange checkpoint (float32) plus a float64 sidecar so resumed
    runs continue bit-exactly."""
    save_checkpoint(directory, adapters.all_tensors())
    state = {f"param.{k}": t.data for k, t in adapters.all_tensors().items()}
    state.update(opt.state_arrays())
    state["clip.ema"] = np.array(
        np.nan if clip_state.ema is None else float(clip_state.ema))
    state["step"] = np.array(float(step))
    np.savez(os.path.join(directory, STATE_FILE), **state)
    with open(os.path.join(directory, "adapters.json"), "w", encoding="utf-8") as fh:
        json.dump({"active": list(adapters.active),
                   "fusion_method": adapters.fusion_method,
                   "tactic_dim": adapters.tactic_dim}, fh, sort_keys=True)


def load_adapters(directory: str, config) -> AdapterSet:
    """Rebuild an AdapterSet from an interchange checkpoint."""
    meta_path = os.path.join(directory, "adapters.json")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    adapters = init_adapters(config, seed=0, active=tuple(meta["active"]),
                             fusion_method=meta["fusion_method"],
                             tactic_dim=meta["tactic_dim"])
    raw = load_checkpoint(directory)
    for name, t in adapters.all_tensors().items():
        if name not in raw:
            raise ConfigError(f"adapter checkpoint missing tensor {name}")
        if tuple(raw[name].shape) != t.shape:
            raise ConfigError(
                f"adapter tensor {name} has shape {raw[name].shape}, "
                f"expected {t.shape}")
        t.data = raw[name]
    return adapters


def _load_train_state(directory: str, adapters: AdapterSet, opt: AdamW,
                      clip_state: GradClipState) -> int:
    arrays = dict(np.load(os.path.join(directory, STATE_FILE)))
    for name, t in adapters.all_tensors().items():
        t.data = np.array(arrays[f"param.{name}"])
    opt.load_state_arrays(arrays)
    ema = float(arrays["clip.ema"])
    clip_state.ema = None if np.isnan(ema) else ema
    return int(arrays["step"])


def train(dataset, base: BasePolicyParams, cfg: TrainConfig, out_dir: str,
          adapters: AdapterSet | None = None, resume_from: str | None = None):
    """Full run: deterministic batches, periodic checkpoints, JSONL metrics.

    Returns (adapters, metrics list). Aborts with the last good checkpoint
    on any non-finite loss.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    if not base.frozen:
        raise ValidationError("base policy must be frozen during adapter training")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_root = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_root, exist_ok=True)

    if adapters is None:
        adapters = init_adapters(base.config, cfg.seed, cfg.active_adapters,
                                 cfg.fusion_method, cfg.tactic_dim)
    opt = AdamW(adapters.trainable_tensors(), beta1=cfg.adam_beta1,
                beta2=cfg.adam_beta2, eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    clip_state = GradClipState()
    start_step = 0
    last_ckpt = None
    if resume_from is not None:
        start_step = _load_train_state(resume_from, adapters, opt, clip_state)
        last_ckpt = resume_from

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    metrics = []
    mode = "a" if resume_from is not None else "w"
    with open(metrics_path, mode, encoding="utf-8") as mfh:
        for step in range(start_step + 1, cfg.total_steps + 1):
            idxs = batch_indices(cfg.seed, step, len(dataset), cfg.batch_size)
            batch = assemble_batch([dataset[i] for i in idxs])
            try:
                record = train_step(batch, base, adapters, opt, clip_state,
                                    cfg, step)
            except NonFiniteError as exc:
                raise TrainAbortError(str(exc), last_checkpoint=last_ckpt) from exc
            metrics.append(record)
            mfh.write(json.dumps(record, sort_keys=True) + "\n")
            if cfg.save_ckpt_freq and step % cfg.save_ckpt_freq == 0:
                ckpt_dir = os.path.join(ckpt_root, f"step_{step:07d}")
                save_train_state(ckpt_dir, adapters, opt, clip_state, step)
                last_ckpt = ckpt_dir
    return adapters, metrics
