"""Synthetic tactic-labeled trajectories and modulation measurement.

Nine scripted archetype policies stand in for a labeled replay corpus: each
draws structured actions from its own biased marginals (action type peak,
delay/queued skew from an aggression scalar, a location heat blob, an
entity-type targeting preference) while observations follow an
archetype-independent seeded procedural process. That makes the conditioned
policy's behavioral shift under each tactic vector directly measurable as a
divergence between action-type marginals.
"""

from __future__ import annotations

import json
import math
import shlex
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import AdapterSet, conditioned_heads
from .autodiff import no_grad
from .errors import ConfigError, NonFiniteError, TrainAbortError, ValidationError
from .policy import HEAD_NAMES, BasePolicyParams, ObservationBatch, PolicyConfig, \
    init_base
from .taxonomy import TACTIC_DIM, LabeledReplay, TacticDistribution
from .trainer import AdamW, GradClipState, TrainConfig, Trajectory, \
    assemble_batch, base_rollout, batch_indices, clip_gradients, loss_batch, lr_at

MIN_SEPARATION_TV = 0.3
N_ENTITY_TYPES = 4


@dataclass(frozen=True)
class ArchetypeScript:
    """One scripted behavioral archetype."""

    category: int
    name: str
    action_marginal: np.ndarray
    aggression: float
    loc_center: tuple
    loc_sigma: float
    target_pref: np.ndarray  # logits over entity types

    def __post_init__(self):
        m = np.asarray(self.action_marginal, dtype=np.float64)
        if (m < 0).any() or abs(m.sum() - 1.0) > 1e-9:
            raise ConfigError(
                f"archetype {self.category}: action marginal is not a distribution")
        if not 0.0 <= self.aggression <= 1.0:
            raise ConfigError(f"archetype {self.category}: aggression outside [0,1]")

    def delay_marginal(self, n_delays: int) -> np.ndarray:
        rate = 0.3 + 2.7 * self.aggression
        w = np.exp(-rate * np.arange(n_delays))
        return w / w.sum()

    @property
    def queued_p(self) -> float:
        return 0.8 - 0.6 * self.aggression

    @property
    def select_p(self) -> float:
        return 0.2 + 0.6 * self.aggression

    def loc_heat(self, grid: int) -> np.ndarray:
        r, c = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
        d2 = (r - self.loc_center[0]) ** 2 + (c - self.loc_center[1]) ** 2
        blob = np.exp(-d2 / (2.0 * self.loc_sigma ** 2))
        heat = 0.9 * blob / blob.sum() + 0.1 / (grid * grid)
        return heat / heat.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats (symmetric, bounded by ln 2)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def half(a):
        nz = a > 0
        return float((a[nz] * np.log(a[nz] / m[nz])).sum())

    return 0.5 * half(p) + 0.5 * half(q)


def validate_scripts(scripts) -> None:
    if len(scripts) != TACTIC_DIM:
        raise ConfigError(f"need {TACTIC_DIM} archetype scripts, got {len(scripts)}")
    cats = sorted(s.category for s in scripts)
    if cats != list(range(TACTIC_DIM)):
        raise ConfigError(f"archetype categories must be 0..8, got {cats}")
    for a in scripts:
        for b in scripts:
            if a.category < b.category:
                tv = total_variation(a.action_marginal, b.action_marginal)
                if tv < MIN_SEPARATION_TV:
                    raise ConfigError(
                        f"archetypes {a.category} and {b.category} too close: "
                        f"TV {tv:.3f} < {MIN_SEPARATION_TV}")


# --- script file format -------------------------------------------------------
#   archetype <cat> name="..." aggression=<f> marginal=<csv of n_action_types>
#             loc=<row>,<col>,<sigma> pref=<csv of 4 logits>

def parse_scripts(text: str) -> list:
    scripts = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = shlex.split(line)
        if parts[0] != "archetype" or len(parts) < 2:
            raise ConfigError(f"scripts line {line_no}: expected 'archetype <cat> ...'")
        kwargs = {"category": int(parts[1])}
        for kv in parts[2:]:
            if "=" not in kv:
                raise ConfigError(f"scripts line {line_no}: bad token {kv!r}")
            k, v = kv.split("=", 1)
            if k == "name":
                kwargs["name"] = v
            elif k == "aggression":
                kwargs["aggression"] = float(v)
            elif k == "marginal":
                kwargs["action_marginal"] = np.array(
                    [float(x) for x in v.split(",")])
            elif k == "loc":
                r, c, s = v.split(",")
                kwargs["loc_center"] = (int(r), int(c))
                kwargs["loc_sigma"] = float(s)
            elif k == "pref":
                kwargs["target_pref"] = np.array([float(x) for x in v.split(",")])
            else:
                raise ConfigError(f"scripts line {line_no}: unknown key {k!r}")
        scripts.append(ArchetypeScript(**kwargs))
    scripts.sort(key=lambda s: s.category)
    validate_scripts(scripts)
    return scripts


def load_scripts(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        return parse_scripts(fh.read())


def default_scripts() -> list:
    from importlib.resources import files
    return parse_scripts(files("tacticraft.data").joinpath("archetypes.txt").read_text())


# --- dataset generation ---------------------------------------------------------

def _gen_obs_arrays(rng, length: int, cfg: PolicyConfig):
    """Archetype-independent procedural observations: a bounded random walk
    over scalar features, random entity sets with type one-hots, noise grid."""
    e, d = cfg.max_entities, cfg.entity_dim
    scalar = np.empty((length, cfg.scalar_dim))
    scalar[0] = rng.normal(0.0, 0.5, cfg.scalar_dim)
    for t in range(1, length):
        scalar[t] = np.clip(scalar[t - 1] + 0.15 * rng.normal(size=cfg.scalar_dim),
                            -3.0, 3.0)
    entities = np.zeros((length, e, d))
    mask = np.zeros((length, e), dtype=bool)
    types = np.empty((length, e), dtype=np.int64)
    for t in range(length):
        types[t] = rng.integers(0, N_ENTITY_TYPES, e)
        entities[t, np.arange(e), types[t]] = 1.0
        entities[t, :, N_ENTITY_TYPES:] = rng.uniform(-1.0, 1.0,
                                                      (e, d - N_ENTITY_TYPES))
        n_valid = int(rng.integers(3, e + 1))
        mask[t, :n_valid] = True
    spatial = 0.5 * rng.random((length, cfg.grid, cfg.grid))
    return scalar, entities, mask, types, spatial


def generate_trajectory(script: ArchetypeScript, cfg: PolicyConfig,
                        length: int, rng, replay_id: str) -> Trajectory:
    if script.action_marginal.shape != (cfg.n_action_types,):
        raise ConfigError(
            f"archetype {script.category} marginal has "
            f"{script.action_marginal.size} entries; policy has "
            f"{cfg.n_action_types} action types")
    scalar, entities, mask, types, spatial = _gen_obs_arrays(rng, length, cfg)
    heat = script.loc_heat(cfg.grid).ravel()
    delay_m = script.delay_marginal(cfg.n_delays)
    at = np.empty(length, dtype=np.int64)
    delay = np.empty(length, dtype=np.int64)
    queued = np.empty(length, dtype=np.int64)
    su = np.zeros((length, cfg.max_entities), dtype=bool)
    tu = np.empty(length, dtype=np.int64)
    loc = np.empty(length, dtype=np.int64)
    for t in range(length):
        at[t] = rng.choice(cfg.n_action_types, p=script.action_marginal)
        delay[t] = rng.choice(cfg.n_delays, p=delay_m)
        queued[t] = int(rng.random() < script.queued_p)
        su[t] = (rng.random(cfg.max_entities) < script.select_p) & mask[t]
        w = np.exp(script.target_pref[types[t]]) * mask[t]
        tu[t] = rng.choice(cfg.max_entities, p=w / w.sum())
        loc[t] = rng.choice(cfg.grid_cells, p=heat)
    tactic = np.full(TACTIC_DIM, 0.1 / (TACTIC_DIM - 1))
    tactic[script.category] = 0.9
    return Trajectory(replay_id=replay_id, category=script.category,
                      tactic=tactic, scalar=scalar, entities=entities,
                      entity_mask=mask, spatial=spatial, action_type=at,
                      delay=delay, queued=queued, selected_units=su,
                      target_unit=tu, location=loc)


def generate_dataset(scripts, n_trajectories: int, length: int, seed: int,
                     cfg: PolicyConfig | None = None, labels_path: str | None = None):
    """Round-robin archetype assignment, one derived rng per trajectory.

    Returns (trajectories, labels); optionally writes the label file.
    """
    if n_trajectories < 1 or length < 1:
        raise ValidationError("need n_trajectories >= 1 and length >= 1")
    validate_scripts(scripts)
    cfg = cfg or PolicyConfig()
    trajectories = []
    labels = []
    for i in range(n_trajectories):
        rng = np.random.default_rng((seed, 2, i))
        script = scripts[i % len(scripts)]
        traj = generate_trajectory(script, cfg, length, rng,
                                   replay_id=f"syn-{seed}-{i:05d}")
        trajectories.append(traj)
        labels.append(LabeledReplay(traj.replay_id,
                                    TacticDistribution(traj.tactic)))
    if labels_path is not None:
        from .labeler import write_labels
        write_labels(labels_path, labels)
    return trajectories, labels


# --- base pre-training ----------------------------------------------------------

def pretrain_base(dataset, steps: int, seed: int,
                  cfg: PolicyConfig | None = None, batch_size: int = 32,
                  learning_rate: float = 0.002):
    """Behavior-clone an unfrozen policy on the archetype mixture WITHOUT
    tactic labels, then freeze it. The result encodes the mixture-average
    behavior that adapters later specialize.

    Returns (params, losses).
    """
    if not dataset:
        raise ValidationError("pretraining dataset is empty")
    cfg = cfg or PolicyConfig()
    length = dataset[0].length
    run_cfg = TrainConfig(
        learning_rate=learning_rate, weight_decay=0.0,
        warm_up_steps=min(50, steps), total_steps=steps,
        grad_clip_kind="global_norm", grad_clip_threshold=5.0,
        batch_size=batch_size, trajectory_length=length, seed=seed,
        save_ckpt_freq=0)
    params = init_base(seed, cfg, frozen=False)
    opt = AdamW(params.tensors, weight_decay=0.0)
    clip_state = GradClipState()
    losses = []
    for step in range(1, steps + 1):
        idxs = batch_indices(seed, step, len(dataset), batch_size)
        batch = assemble_batch([dataset[i] for i in idxs])
        opt.zero_grad()
        try:
            result = loss_batch(batch, params, None, run_cfg)
            result.loss.backward()
        except NonFiniteError as exc:
            raise TrainAbortError(f"pre-training diverged: {exc}") from exc
        clip_gradients(opt.params, clip_state, run_cfg)
        opt.step(lr_at(step, run_cfg))
        losses.append(result.total)
    params.freeze()
    return params, losses


# --- modulation evaluation --------------------------------------------------------

@dataclass
class EvalReport:
    """Divergence summary for a trained adapter set.

    match_matrix[k][j] is the JS divergence between the action-type marginal
    of the policy conditioned on archetype k's one-hot and archetype j's
    scripted marginal; the modulation score is the mean diagonal advantage
    min_offdiag - diagonal (positive means each conditioning vector pulls
    behavior toward its own archetype).
    """

    match_matrix: np.ndarray          # [9, 9]
    per_head_kl: dict                 # head -> [n_tactics]
    modulation_score: float
    diagonal_dominant: bool
    action_marginals: np.ndarray      # [n_tactics, n_action_types]
    tactic_names: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "match_matrix": [[float(v) for v in row] for row in self.match_matrix],
            "per_head_kl": {h: [float(v) for v in vals]
                            for h, vals in self.per_head_kl.items()},
            "modulation_score": float(self.modulation_score),
            "diagonal_dominant": bool(self.diagonal_dominant),
            "action_marginals": [[float(v) for v in row]
                                 for row in self.action_marginals],
            "tactic_names": self.tactic_names,
        }

    def render_text(self) -> str:
        lines = [f"modulation score: {self.modulation_score:+.4f}   "
                 f"diagonal dominant: {self.diagonal_dominant}"]
        lines.append("match matrix (JS to archetype marginals; rows = conditioning):")
        header = "      " + " ".join(f"a{j}    " for j in range(
            self.match_matrix.shape[1]))
        lines.append(header)
        for k, row in enumerate(self.match_matrix):
            cells = " ".join(f"{v:.3f}" for v in row)
            lines.append(f"  t{k}  {cells}")
        lines.append("mean KL to base per head:")
        for head, vals in self.per_head_kl.items():
            lines.append(f"  {head:>15s}: " + " ".join(f"{v:.4f}" for v in vals))
        return "\n".join(lines)


def generate_eval_observations(n_eval: int, length: int, seed: int,
                               cfg: PolicyConfig):
    """Fresh observation windows, flattened time-major like a train batch."""
    n_traj = max(1, math.ceil(n_eval / length))
    scalars, entities, masks, spatials = [], [], [], []
    for i in range(n_traj):
        rng = np.random.default_rng((seed, 4, i))
        s, e, m, _, sp = _gen_obs_arrays(rng, length, cfg)
        scalars.append(s)
        entities.append(e)
        masks.append(m)
        spatials.append(sp)

    def flat(stack):
        arr = np.stack(stack)          # [B, L, ...]
        return np.ascontiguousarray(arr.swapaxes(0, 1)).reshape(
            (-1,) + arr.shape[2:])

    obs = ObservationBatch(scalar=flat(scalars), entities=flat(entities),
                           entity_mask=flat(masks), spatial=flat(spatials))
    return obs, n_traj, length


def _mean_head_kl(teacher, student, mask) -> dict:
    out = {}
    for head in HEAD_NAMES:
        if head == "selected_units":
            kl = ad.bernoulli_kl(teacher.head(head), student.head(head), mask=mask)
            counts = mask.astype(np.float64).sum(axis=-1)
            out[head] = float(np.mean(kl.data.sum(axis=-1) / counts))
        else:
            m = mask if head == "target_unit" else None
            kl = ad.kl_categorical(teacher.head(head), student.head(head), mask=m)
            out[head] = float(np.mean(kl.data))
    return out


def conditioned_stats(base: BasePolicyParams, adapters: AdapterSet, tactics,
                      n_eval: int = 4096, length: int = 8, seed: int = 0):
    """Expected action-type marginal and mean per-head KL-to-base for each
    tactic vector, over a shared set of fresh observations."""
    cfg = base.config
    obs, n_traj, length = generate_eval_observations(n_eval, length, seed, cfg)
    with no_grad():
        rollout = base_rollout(base, obs, n_traj, length)
        teacher = rollout.teacher
        marginals = []
        kls = []
        for tactic in tactics:
            vec = tactic.probs if isinstance(tactic, TacticDistribution) \
                else np.asarray(tactic, dtype=np.float64)
            rows = np.repeat(vec[None, :], obs.n, axis=0)
            student = conditioned_heads(rollout.core, rollout.enc, rows,
                                        base, adapters)
            probs = ad.softmax(student.action_type).data
            marginals.append(probs.mean(axis=0))
            kls.append(_mean_head_kl(teacher, student, teacher.entity_mask))
    return np.stack(marginals), kls


def evaluate_modulation(base: BasePolicyParams, adapters: AdapterSet, scripts,
                        n_eval: int = 4096, length: int = 8,
                        seed: int = 0) -> EvalReport:
    """Condition on each archetype one-hot and measure where behavior moves."""
    validate_scripts(scripts)
    if scripts[0].action_marginal.shape != (base.config.n_action_types,):
        raise ConfigError("archetype marginals do not match the policy's "
                          "action-type count")
    one_hots = np.eye(TACTIC_DIM)
    marginals, kls = conditioned_stats(base, adapters, list(one_hots),
                                       n_eval=n_eval, length=length, seed=seed)
    n = TACTIC_DIM
    m = np.zeros((n, n))
    for k in range(n):
        for j in range(n):
            m[k, j] = js_divergence(marginals[k], scripts[j].action_marginal)
    advantages = []
    dominant = True
    for k in range(n):
        off = np.delete(m[k], k)
        advantages.append(off.min() - m[k, k])
        if m[k, k] > off.min():
            dominant = False
    per_head = {head: [kl[head] for kl in kls] for head in HEAD_NAMES}
    return EvalReport(match_matrix=m, per_head_kl=per_head,
                      modulation_score=float(np.mean(advantages)),
                      diagonal_dominant=dominant,
                      action_marginals=marginals,
                      tactic_names=[f"onehot_{k}" for k in range(n)])


def head_divergence_profile(base: BasePolicyParams, adapters: AdapterSet,
                            tactics=None, n_eval: int = 4096, length: int = 8,
                            seed: int = 0) -> dict:
    """Mean KL(base ‖ conditioned) per head per tactic vector."""
    if tactics is None:
        tactics = list(np.eye(TACTIC_DIM))
    _, kls = conditioned_stats(base, adapters, tactics, n_eval=n_eval,
                               length=length, seed=seed)
    return {head: [kl[head] for kl in kls] for head in HEAD_NAMES}


def write_report(path: str, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=2)
        fh.write("\n")
