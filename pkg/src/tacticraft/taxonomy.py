"""The nine ZvZ tactical archetypes and the tactic-distribution vector.

Category 0 is the catch-all for build orders that are too short or fit no
archetype; the remaining eight are the named strategy classes. Conditioning
vectors are probability distributions over these nine indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

TACTIC_DIM = 9
_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class TacticCategory:
    index: int
    name: str
    description: str


CATEGORIES = (
    TacticCategory(0, "Unclassified Strategy",
                   "too short or no clear strategic direction"),
    TacticCategory(1, "Standard Roach-based Strategy",
                   "roach warren plus ranged-attack upgrades into roach timing pushes"),
    TacticCategory(2, "Spire-based Strategy",
                   "gas-heavy lair play teching to spire and mutalisk map control"),
    TacticCategory(3, "Economic Three Base Strategy",
                   "fast third hatchery, heavy drone production, defensive posture"),
    TacticCategory(4, "Early Pool Aggression",
                   "12-pool or earlier with zergling pressure over economy"),
    TacticCategory(5, "+1 Zergling Strategy",
                   "early evolution chamber melee upgrade into mass zergling timing"),
    TacticCategory(6, "Nydus-based Strategy",
                   "lair into nydus network for surprise mobility attacks"),
    TacticCategory(7, "Lurker Transition Strategy",
                   "hydralisk den into lurker den for mid-game siege control"),
    TacticCategory(8, "Early/Mid-early Game All-in Strategy",
                   "mass basic units off 2-3 bases without lair tech, committed attack"),
)


class TacticDistribution:
    """A length-9 probability vector over the tactical archetypes."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        arr = np.asarray(probs, dtype=np.float64)
        if arr.shape != (TACTIC_DIM,):
            raise ValidationError(
                f"tactic distribution must have {TACTIC_DIM} entries, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tactic distribution contains non-finite values")
        if (arr < -_SIMPLEX_TOL).any() or (arr > 1.0 + _SIMPLEX_TOL).any():
            raise ValidationError("tactic distribution components outside [0, 1]")
        if abs(arr.sum() - 1.0) > _SIMPLEX_TOL:
            raise ValidationError(
                f"tactic distribution sums to {arr.sum():.12f}, not 1")
        self.probs = np.clip(arr, 0.0, 1.0)

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())

    def tolist(self) -> list:
        return [float(v) for v in self.probs]

    def __eq__(self, other):
        return isinstance(other, TacticDistribution) and \
            np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"TacticDistribution({np.round(self.probs, 4).tolist()})"


@dataclass(frozen=True)
class LabeledReplay:
    replay_id: str
    tactic: TacticDistribution

    def __post_init__(self):
        if not self.replay_id:
            raise ValidationError("replay_id must be non-empty")


def softmax_normalize(logprobs) -> TacticDistribution:
    """Turn 9 classifier log-probabilities (or scores) into a distribution.

    Shift-invariant: adding a constant to every input leaves the output
    unchanged up to floating-point roundoff.
    """
    arr = np.asarray(logprobs, dtype=np.float64)
    if arr.shape != (TACTIC_DIM,):
        raise ValidationError(
            f"expected {TACTIC_DIM} log-probabilities, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("log-probabilities must be finite")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    p = e / e.sum()
    return TacticDistribution(p / p.sum())


def one_hot(category_index: int) -> TacticDistribution:
    if not 0 <= category_index < TACTIC_DIM:
        raise ValidationError(f"category index {category_index} outside [0, 8]")
    p = np.zeros(TACTIC_DIM)
    p[category_index] = 1.0
    return TacticDistribution(p)


def blend(a: TacticDistribution, b: TacticDistribution, w: float) -> TacticDistribution:
    """Convex combination; ``w`` weights the first argument (w=0 returns b)."""
    if not 0.0 <= w <= 1.0:
        raise ValidationError(f"blend weight {w} outside [0, 1]")
    return TacticDistribution(w * a.probs + (1.0 - w) * b.probs)
