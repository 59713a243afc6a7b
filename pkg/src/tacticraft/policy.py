"""Frozen multi-head base policy at desk scale.

Observation encoders (scalar MLP, per-entity MLP with masked mean pooling,
patch-averaged spatial features plus a per-cell skip path), a
layer-normalized LSTM core with an output projection, and six action heads:
action type, delay, queued, selected units (per-entity logits), target unit
(pointer attention over entities), and location (grid logits from the
spatial skip fused with the core state).

All head and encoder widths live in PolicyConfig; the defaults exercise
every head shape class while staying small enough to gradient-check.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LstmParams, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DimensionError, ValidationError

HEAD_NAMES = ("action_type", "delay", "queued", "selected_units",
              "target_unit", "location")


@dataclass(frozen=True)
class PolicyConfig:
    scalar_dim: int = 16
    entity_dim: int = 8
    max_entities: int = 16
    grid: int = 16
    n_action_types: int = 12
    n_delays: int = 8
    d_scalar: int = 32
    d_entity: int = 32
    d_spatial: int = 32
    patch: int = 4
    skip_channels: int = 8
    d_embed: int = 64
    d_hidden: int = 360
    d_core: int = 64

    def __post_init__(self):
        if self.grid % self.patch != 0:
            raise ValidationError("grid must be divisible by patch size")

    @property
    def grid_cells(self) -> int:
        return self.grid * self.grid

    @property
    def n_patches(self) -> int:
        return (self.grid // self.patch) ** 2

    def head_dims(self) -> dict:
        return {
            "action_type": self.n_action_types,
            "delay": self.n_delays,
            "queued": 2,
            "selected_units": self.max_entities,
            "target_unit": self.max_entities,
            "location": self.grid_cells,
            "lstm": self.d_core,
        }

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj: dict) -> "PolicyConfig":
        return PolicyConfig(**obj)


# --- observations -----------------------------------------------------------

@dataclass
class Observation:
    scalar: np.ndarray          # [scalar_dim]
    entities: np.ndarray        # [max_entities, entity_dim]
    entity_mask: np.ndarray     # [max_entities] bool
    spatial: np.ndarray         # [grid, grid]

    def __post_init__(self):
        self.entity_mask = np.asarray(self.entity_mask, dtype=bool)
        if not self.entity_mask.any():
            raise ValidationError("observation needs at least one valid entity")
        if self.spatial.ndim != 2 or self.spatial.shape[0] != self.spatial.shape[1]:
            raise ValidationError("spatial grid must be square")
        for name in ("scalar", "entities", "spatial"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"observation field {name} is not finite")


@dataclass
class ObservationBatch:
    """Stacked observations with leading dim N."""

    scalar: np.ndarray          # [N, scalar_dim]
    entities: np.ndarray        # [N, E, entity_dim]
    entity_mask: np.ndarray     # [N, E] bool
    spatial: np.ndarray         # [N, grid, grid]

    @staticmethod
    def stack(observations) -> "ObservationBatch":
        return ObservationBatch(
            scalar=np.stack([o.scalar for o in observations]),
            entities=np.stack([o.entities for o in observations]),
            entity_mask=np.stack([o.entity_mask for o in observations]),
            spatial=np.stack([o.spatial for o in observations]),
        )

    @property
    def n(self) -> int:
        return self.scalar.shape[0]


@dataclass
class ActionSample:
    action_type: int
    delay: int
    queued: int
    selected_units: np.ndarray  # [max_entities] bool
    target_unit: int
    location: int

    def location_rc(self, grid: int):
        return self.location // grid, self.location % grid


@dataclass
class PolicyOutput:
    """Per-head logits plus the core activations and recurrent state."""

    action_type: Tensor
    delay: Tensor
    queued: Tensor
    selected_units: Tensor
    target_unit: Tensor
    location: Tensor
    core_out: Tensor
    state: tuple
    entity_mask: np.ndarray

    def head(self, name: str) -> Tensor:
        return getattr(self, name)

    def head_logits(self) -> dict:
        return {name: getattr(self, name) for name in HEAD_NAMES}


# --- parameters -------------------------------------------------------------

@dataclass
class BasePolicyParams:
    config: PolicyConfig
    tensors: dict = field(default_factory=dict)
    frozen: bool = True

    def freeze(self):
        self.frozen = True
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self):
        self.frozen = False
        for t in self.tensors.values():
            t.requires_grad = True
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def lstm(self) -> LstmParams:
        t = self.tensors
        return LstmParams(w_x=t["core.lstm.w_x"], w_h=t["core.lstm.w_h"],
                          b=t["core.lstm.b"], ln_gain=t["core.lstm.ln_gain"],
                          ln_bias=t["core.lstm.ln_bias"])

    def zero_state(self, n: int):
        h = Tensor(np.zeros((n, self.config.d_hidden)))
        return h, Tensor(np.zeros((n, self.config.d_hidden)))


def _param_shapes(cfg: PolicyConfig) -> dict:
    enc_cat = cfg.d_scalar + cfg.d_entity + cfg.d_spatial
    return {
        "enc.scalar.w": (cfg.scalar_dim, cfg.d_scalar),
        "enc.scalar.b": (cfg.d_scalar,),
        "enc.entity.w": (cfg.entity_dim, cfg.d_entity),
        "enc.entity.b": (cfg.d_entity,),
        "enc.spatial.w": (cfg.n_patches, cfg.d_spatial),
        "enc.spatial.b": (cfg.d_spatial,),
        "enc.skip.w": (cfg.skip_channels,),
        "enc.skip.b": (cfg.skip_channels,),
        "enc.proj.w": (enc_cat, cfg.d_embed),
        "enc.proj.b": (cfg.d_embed,),
        "core.lstm.w_x": (cfg.d_embed, 4 * cfg.d_hidden),
        "core.lstm.w_h": (cfg.d_hidden, 4 * cfg.d_hidden),
        "core.lstm.b": (4 * cfg.d_hidden,),
        "core.lstm.ln_gain": (4 * cfg.d_hidden,),
        "core.lstm.ln_bias": (4 * cfg.d_hidden,),
        "core.proj.w": (cfg.d_hidden, cfg.d_core),
        "core.proj.b": (cfg.d_core,),
        "head.action_type.w1": (cfg.d_core, cfg.d_core),
        "head.action_type.b1": (cfg.d_core,),
        "head.action_type.w2": (cfg.d_core, cfg.n_action_types),
        "head.action_type.b2": (cfg.n_action_types,),
        "head.delay.w": (cfg.d_core, cfg.n_delays),
        "head.delay.b": (cfg.n_delays,),
        "head.queued.w": (cfg.d_core, 2),
        "head.queued.b": (2,),
        "head.target_unit.w": (cfg.d_core, cfg.d_entity),
        "head.target_unit.b": (cfg.d_entity,),
        "head.selected_units.w": (cfg.d_core, cfg.d_entity),
        "head.selected_units.b": (cfg.d_entity,),
        "head.location.core_w": (cfg.d_core, cfg.skip_channels),
        "head.location.core_b": (cfg.skip_channels,),
        "head.location.cell_w": (cfg.skip_channels, 1),
        "head.location.cell_b": (1,),
    }


def init_base(seed: int, config: PolicyConfig | None = None,
              frozen: bool = True) -> BasePolicyParams:
    """Small-random weights (uniform ±0.1), zero biases, unit layer-norm
    gains; frozen unless asked otherwise."""
    cfg = config or PolicyConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b") or leaf == "ln_bias":
            data = np.zeros(shape)
        elif leaf == "ln_gain":
            data = np.ones(shape)
        else:
            data = rng.uniform(-0.1, 0.1, size=shape)
        tensors[name] = Tensor(data, requires_grad=False)
    params = BasePolicyParams(config=cfg, tensors=tensors, frozen=True)
    if not frozen:
        params.unfreeze()
    return params


def save_base(directory: str, params: BasePolicyParams) -> None:
    save_checkpoint(directory, {f"base.{k}": v for k, v in params.tensors.items()})
    with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(params.config.to_json(), fh, sort_keys=True)


def load_base(directory: str) -> BasePolicyParams:
    cfg_path = os.path.join(directory, "config.json")
    with open(cfg_path, encoding="utf-8") as fh:
        cfg = PolicyConfig.from_json(json.load(fh))
    raw = load_checkpoint(directory)
    tensors = {}
    for name, shape in _param_shapes(cfg).items():
        key = f"base.{name}"
        if key not in raw:
            raise DimensionError(f"checkpoint missing tensor {key}")
        if tuple(raw[key].shape) != shape:
            raise DimensionError(
                f"tensor {key} has shape {raw[key].shape}, expected {shape}")
        tensors[name] = Tensor(raw[key], requires_grad=False)
    return BasePolicyParams(config=cfg, tensors=tensors, frozen=True)


# --- forward passes ---------------------------------------------------------

@dataclass
class EncoderOut:
    embedding: Tensor          # [N, d_embed]
    entity_embeddings: Tensor  # [N, E, d_entity]
    spatial_skip: Tensor       # [N, grid_cells, skip_channels]
    entity_mask: np.ndarray    # [N, E]


def encode(obs: ObservationBatch, params: BasePolicyParams) -> EncoderOut:
    """Deterministic dense features: masked-out entity rows have no effect."""
    cfg = params.config
    t = params.tensors
    n = obs.n
    if obs.scalar.shape[1] != cfg.scalar_dim or obs.entities.shape[2] != cfg.entity_dim \
            or obs.spatial.shape[1] != cfg.grid:
        raise ValidationError("observation dims do not match policy config")
    if not obs.entity_mask.any(axis=1).all():
        raise ValidationError("every observation needs >= 1 valid entity")

    scalar_h = ad.relu(ad.add(ad.matmul(Tensor(obs.scalar), t["enc.scalar.w"]),
                              t["enc.scalar.b"]))

    e_flat = ad.matmul(Tensor(obs.entities.reshape(n * cfg.max_entities,
                                                   cfg.entity_dim)),
                       t["enc.entity.w"])
    e_hidden = ad.relu(ad.add(e_flat, t["enc.entity.b"]))
    entity_emb = ad.reshape(e_hidden, (n, cfg.max_entities, cfg.d_entity))
    maskf = obs.entity_mask.astype(np.float64)
    counts = maskf.sum(axis=1, keepdims=True)
    pooled = ad.mul(ad.tsum(ad.mul(entity_emb, maskf[:, :, None]), axis=1),
                    1.0 / counts)

    side = cfg.grid // cfg.patch
    patches = obs.spatial.reshape(n, side, cfg.patch, side, cfg.patch) \
        .mean(axis=(2, 4)).reshape(n, cfg.n_patches)
    spatial_h = ad.relu(ad.add(ad.matmul(Tensor(patches), t["enc.spatial.w"]),
                               t["enc.spatial.b"]))

    cells = Tensor(obs.spatial.reshape(n, cfg.grid_cells, 1))
    skip = ad.add(ad.mul(cells, t["enc.skip.w"]), t["enc.skip.b"])

    cat = ad.concat([scalar_h, pooled, spatial_h], axis=-1)
    embedding = ad.add(ad.matmul(cat, t["enc.proj.w"]), t["enc.proj.b"])
    return EncoderOut(embedding=embedding, entity_embeddings=entity_emb,
                      spatial_skip=skip, entity_mask=obs.entity_mask)


def core_step(embedding: Tensor, state, params: BasePolicyParams):
    """One recurrent step plus the output projection."""
    h, c = state
    h2, c2 = ad.lstm_cell(embedding, h, c, params.lstm())
    core_out = ad.add(ad.matmul(h2, params.tensors["core.proj.w"]),
                      params.tensors["core.proj.b"])
    return core_out, (h2, c2)


def heads_forward(core_out: Tensor, entity_embeddings: Tensor,
                  spatial_skip: Tensor, entity_mask: np.ndarray,
                  params: BasePolicyParams, state=None) -> PolicyOutput:
    """Raw logits for the six heads. Entity heads keep the mask alongside;
    consumers apply it when normalizing or sampling."""
    cfg = params.config
    t = params.tensors
    if not np.asarray(entity_mask).any(axis=-1).all():
        raise ValidationError("entity mask with zero valid entities")
    n = core_out.shape[0]

    at_h = ad.relu(ad.add(ad.matmul(core_out, t["head.action_type.w1"]),
                          t["head.action_type.b1"]))
    action_type = ad.add(ad.matmul(at_h, t["head.action_type.w2"]),
                         t["head.action_type.b2"])
    delay = ad.add(ad.matmul(core_out, t["head.delay.w"]), t["head.delay.b"])
    queued = ad.add(ad.matmul(core_out, t["head.queued.w"]), t["head.queued.b"])

    tu_query = ad.add(ad.matmul(core_out, t["head.target_unit.w"]),
                      t["head.target_unit.b"])
    target_unit = ad.entity_dot(tu_query, entity_embeddings)
    su_query = ad.add(ad.matmul(core_out, t["head.selected_units.w"]),
                      t["head.selected_units.b"])
    selected_units = ad.entity_dot(su_query, entity_embeddings)

    core_sp = ad.add(ad.matmul(core_out, t["head.location.core_w"]),
                     t["head.location.core_b"])
    cell_feat = ad.relu(ad.add(spatial_skip, ad.reshape(core_sp,
                                                        (n, 1, cfg.skip_channels))))
    loc_flat = ad.add(ad.matmul(ad.reshape(cell_feat,
                                           (n * cfg.grid_cells, cfg.skip_channels)),
                                t["head.location.cell_w"]),
                      t["head.location.cell_b"])
    location = ad.reshape(loc_flat, (n, cfg.grid_cells))

    return PolicyOutput(action_type=action_type, delay=delay, queued=queued,
                        selected_units=selected_units, target_unit=target_unit,
                        location=location, core_out=core_out, state=state,
                        entity_mask=np.asarray(entity_mask, dtype=bool))


def policy_forward_batch(obs: ObservationBatch, state,
                         params: BasePolicyParams) -> PolicyOutput:
    enc = encode(obs, params)
    core_out, state2 = core_step(enc.embedding, state, params)
    return heads_forward(core_out, enc.entity_embeddings, enc.spatial_skip,
                         enc.entity_mask, params, state=state2)


def policy_forward(obs: Observation, state, params: BasePolicyParams) -> PolicyOutput:
    """Single-observation forward; state defaults to zeros."""
    batch = ObservationBatch.stack([obs])
    if state is None:
        state = params.zero_state(1)
    return policy_forward_batch(batch, state, params)


# --- sampling ---------------------------------------------------------------

def _gumbel_argmax(rng, logits: np.ndarray, temperature: float,
                   mask: np.ndarray | None = None) -> int:
    z = logits / temperature + rng.gumbel(size=logits.shape)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    return int(np.argmax(z))


def sample_action(po: PolicyOutput, rng_seed, temperature: float = 1.0,
                  row: int = 0) -> ActionSample:
    """Sample one structured action from the output's distributions.

    Uses Gumbel-max per categorical head so the temperature -> 0 limit is an
    exact argmax without overflow; reproducible for a fixed seed.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    rng = np.random.default_rng(rng_seed)
    mask = po.entity_mask[row]
    at = _gumbel_argmax(rng, po.action_type.data[row], temperature)
    delay = _gumbel_argmax(rng, po.delay.data[row], temperature)
    queued = _gumbel_argmax(rng, po.queued.data[row], temperature)
    tu = _gumbel_argmax(rng, po.target_unit.data[row], temperature, mask=mask)
    loc = _gumbel_argmax(rng, po.location.data[row], temperature)
    su_logits = po.selected_units.data[row] / temperature
    u = rng.random(su_logits.shape)
    selected = (np.log(u) - np.log1p(-u) < su_logits) & mask
    return ActionSample(action_type=at, delay=delay, queued=queued,
                        selected_units=selected, target_unit=tu, location=loc)
