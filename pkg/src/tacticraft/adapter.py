"""Zero-initialized tactic-conditioned adapters and fusion with the base.

Each attach point carries a small MLP (tactic vector -> 64 -> 32 -> output)
whose final layer starts at exactly zero, so the conditioned policy is
bit-for-bit the base policy until training moves it. Attach points cover
the six action heads plus the recurrent core output (`lstm`); fusion is
additive by default, with a learned-gate alternative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .policy import BasePolicyParams, EncoderOut, ObservationBatch, PolicyConfig, \
    PolicyOutput, core_step, encode, heads_forward
from .taxonomy import TACTIC_DIM, TacticDistribution

ADAPTER_POINTS = ("action_type", "delay", "queued", "selected_units",
                  "target_unit", "location", "lstm")
FUSION_METHODS = ("add", "gated")
HIDDEN_1 = 64
HIDDEN_2 = 32


@dataclass
class AdapterParams:
    """One attach point's trainable tensors. ``w_out``/``b_out`` are zero at
    init; the earlier layers are small-random so their gradients are live."""

    w1: Tensor      # [tactic_dim, HIDDEN_1]
    b1: Tensor      # [HIDDEN_1]
    w2: Tensor      # [HIDDEN_1, HIDDEN_2]
    b2: Tensor      # [HIDDEN_2]
    w_out: Tensor   # [HIDDEN_2, out_dim]
    b_out: Tensor   # [out_dim]
    gate: Tensor    # scalar, used only under gated fusion

    @property
    def out_dim(self) -> int:
        return self.w_out.shape[1]

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w_out": self.w_out, "b_out": self.b_out, "gate": self.gate}

    def param_count(self) -> int:
        # the gate only participates under gated fusion
        return sum(t.size for n, t in self.tensors().items() if n != "gate")


def init_adapter(out_dim: int, rng, tactic_dim: int = TACTIC_DIM) -> AdapterParams:
    return AdapterParams(
        w1=Tensor(rng.uniform(-0.1, 0.1, (tactic_dim, HIDDEN_1)), requires_grad=True),
        b1=Tensor(rng.uniform(-0.1, 0.1, (HIDDEN_1,)), requires_grad=True),
        w2=Tensor(rng.uniform(-0.1, 0.1, (HIDDEN_1, HIDDEN_2)), requires_grad=True),
        b2=Tensor(rng.uniform(-0.1, 0.1, (HIDDEN_2,)), requires_grad=True),
        w_out=Tensor(np.zeros((HIDDEN_2, out_dim)), requires_grad=True),
        b_out=Tensor(np.zeros(out_dim), requires_grad=True),
        gate=Tensor(np.zeros(()), requires_grad=True),
    )


@dataclass
class AdapterSet:
    params: dict = field(default_factory=dict)  # point -> AdapterParams
    active: tuple = ADAPTER_POINTS
    fusion_method: str = "add"
    tactic_dim: int = TACTIC_DIM

    def __post_init__(self):
        self.active = tuple(self.active)
        unknown = [p for p in self.active if p not in ADAPTER_POINTS]
        if unknown:
            raise ConfigError(f"unknown adapter attach points {unknown}")
        if self.fusion_method not in FUSION_METHODS:
            raise ConfigError(f"unknown fusion method {self.fusion_method!r}")
        missing = [p for p in self.active if p not in self.params]
        if missing:
            raise ConfigError(f"active attach points without params: {missing}")

    def trainable_tensors(self) -> dict:
        out = {}
        for point in self.active:
            for name, t in self.params[point].tensors().items():
                if name == "gate" and self.fusion_method != "gated":
                    continue
                out[f"adapter.{point}.{name}"] = t
        return out

    def all_tensors(self) -> dict:
        return {f"adapter.{point}.{name}": t
                for point, p in self.params.items()
                for name, t in p.tensors().items()}

    def param_count(self) -> int:
        return sum(self.params[p].param_count() for p in self.active)


def init_adapters(config: PolicyConfig, seed: int, active=ADAPTER_POINTS,
                  fusion_method: str = "add",
                  tactic_dim: int = TACTIC_DIM) -> AdapterSet:
    unknown = [p for p in active if p not in ADAPTER_POINTS]
    if unknown:
        raise ConfigError(f"unknown adapter attach points {unknown}")
    rng = np.random.default_rng(seed)
    dims = config.head_dims()
    params = {point: init_adapter(dims[point], rng, tactic_dim)
              for point in active}
    return AdapterSet(params=params, active=tuple(active),
                      fusion_method=fusion_method, tactic_dim=tactic_dim)


def _as_tactic_rows(tactic, n: int | None = None) -> np.ndarray:
    if isinstance(tactic, TacticDistribution):
        arr = tactic.probs[None, :]
    else:
        arr = np.asarray(tactic, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
    if n is not None and arr.shape[0] == 1 and n > 1:
        arr = np.repeat(arr, n, axis=0)
    return arr


def adapter_forward(tactic, params: AdapterParams) -> Tensor:
    """Delta logits for a tactic vector (or [N, tactic_dim] batch of them).

    The tactic input is a constant; gradients flow into the adapter tensors
    only. A 1-D input yields a 1-D delta.
    """
    rows = _as_tactic_rows(tactic)
    if rows.shape[1] != params.w1.shape[0]:
        raise DimensionError(
            f"tactic dim {rows.shape[1]} != adapter input {params.w1.shape[0]}")
    single = isinstance(tactic, TacticDistribution) or np.asarray(tactic).ndim == 1
    h1 = ad.relu(ad.add(ad.matmul(Tensor(rows), params.w1), params.b1))
    h2 = ad.relu(ad.add(ad.matmul(h1, params.w2), params.b2))
    out = ad.add(ad.matmul(h2, params.w_out), params.b_out)
    if single:
        out = ad.reshape(out, (-1,))
    return out


def fuse(base: Tensor, delta: Tensor, method: str = "add",
         gate: Tensor | None = None) -> Tensor:
    """Combine base logits with an adapter delta."""
    if base.shape != delta.shape:
        raise DimensionError(f"fuse shapes differ: {base.shape} vs {delta.shape}")
    if method == "add":
        return ad.add(base, delta)
    if method == "gated":
        if gate is None:
            raise ConfigError("gated fusion needs a gate tensor")
        return ad.add(base, ad.mul(ad.sigmoid(gate), delta))
    raise ConfigError(f"unknown fusion method {method!r}")


def _fuse_point(adapters: AdapterSet, point: str, base_value: Tensor,
                tactic_rows: np.ndarray) -> Tensor:
    if point not in adapters.active:
        return base_value
    p = adapters.params[point]
    delta = adapter_forward(tactic_rows, p)
    return fuse(base_value, delta, adapters.fusion_method, gate=p.gate)


def conditioned_heads(core_base: Tensor, enc: EncoderOut, tactic_rows: np.ndarray,
                      base: BasePolicyParams, adapters: AdapterSet,
                      state=None) -> PolicyOutput:
    """Heads under tactic conditioning, given precomputed base activations.

    The `lstm` point fuses into the core output before any head consumes
    it; each head point fuses into that head's logits. Inactive points pass
    through bit-exactly.
    """
    core = _fuse_point(adapters, "lstm", core_base, tactic_rows)
    po = heads_forward(core, enc.entity_embeddings, enc.spatial_skip,
                       enc.entity_mask, base, state=state)
    fused = {name: _fuse_point(adapters, name, po.head(name), tactic_rows)
             for name in po.head_logits()}
    return PolicyOutput(core_out=core, state=po.state, entity_mask=po.entity_mask,
                        **fused)


def conditioned_forward_batch(obs: ObservationBatch, state, tactic,
                              base: BasePolicyParams,
                              adapters: AdapterSet) -> PolicyOutput:
    enc = encode(obs, base)
    core_base, state2 = core_step(enc.embedding, state, base)
    rows = _as_tactic_rows(tactic, n=obs.n)
    return conditioned_heads(core_base, enc, rows, base, adapters, state=state2)


def conditioned_forward(obs, state, tactic, base: BasePolicyParams,
                        adapters: AdapterSet) -> PolicyOutput:
    """Single-observation conditioned forward; state defaults to zeros."""
    batch = ObservationBatch.stack([obs])
    if state is None:
        state = base.zero_state(1)
    return conditioned_forward_batch(batch, state, tactic, base, adapters)
