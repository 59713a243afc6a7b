"""Parsing and handling of replay-derived build-order text.

One build order per file: optional ``# replay_id:`` / ``# mmr:`` header
comments, then lines of the form ``<supply> <m:ss> <action>[ ×<k>]``.
Table-style header/divider rows are skipped. Serialization is JSON lines,
one object per build order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import BuildOrderParseError, OrderingError, ValidationError

_LINE_RE = re.compile(
    r"^\s*(?P<supply>\S+)\s+(?P<clock>\S+)\s+(?P<action>.+?)"
    r"(?:\s+[x×]\s*(?P<count>\d+))?\s*$")
_CLOCK_RE = re.compile(r"^(\d{1,2}):([0-5]\d)$")
_HEADER_RE = re.compile(r"^\s*supply\s+time\s+(build\s+)?action\s*$", re.IGNORECASE)
_RULE_RE = re.compile(r"^[\s\-=_|+]+$")


@dataclass(frozen=True)
class BuildEntry:
    supply: int
    time_s: int
    action: str
    count: int = 1

    def __post_init__(self):
        if self.supply < 0 or self.time_s < 0:
            raise ValidationError("supply and time must be non-negative")
        if self.count < 1:
            raise ValidationError("count must be >= 1")
        if not self.action.strip():
            raise ValidationError("action name must be non-empty")


@dataclass
class BuildOrder:
    entries: list = field(default_factory=list)
    replay_id: str = ""
    mmr: int | None = None

    def __post_init__(self):
        if not self.replay_id:
            raise ValidationError("replay_id must be non-empty")
        last = -1
        for i, e in enumerate(self.entries):
            if e.time_s < last:
                raise OrderingError(
                    f"entry {i} time {e.time_s}s precedes previous {last}s")
            last = e.time_s


def parse_line(line: str, line_no: int | None = None) -> BuildEntry:
    """Parse one ``<supply> <m:ss> <action>[ ×<k>]`` row."""
    m = _LINE_RE.match(line)
    if not m:
        raise BuildOrderParseError(
            f"cannot split line into supply/time/action: {line!r}",
            line_no=line_no, col=1)
    supply_s, clock, action = m.group("supply"), m.group("clock"), m.group("action")
    if not supply_s.isdigit():
        raise BuildOrderParseError(
            f"supply field {supply_s!r} is not numeric",
            line_no=line_no, col=line.find(supply_s) + 1)
    cm = _CLOCK_RE.match(clock)
    if not cm:
        raise BuildOrderParseError(
            f"malformed clock {clock!r} (expected m:ss, seconds 00-59)",
            line_no=line_no, col=line.find(clock) + 1)
    time_s = int(cm.group(1)) * 60 + int(cm.group(2))
    count = int(m.group("count")) if m.group("count") else 1
    # normalize any unicode multiplier glyph left inside the action name
    action = action.replace("×", "x").strip()
    return BuildEntry(supply=int(supply_s), time_s=time_s, action=action, count=count)


def _is_noise(line: str) -> bool:
    stripped = line.strip()
    if not stripped:
        return True
    if _RULE_RE.match(stripped):
        return True
    return bool(_HEADER_RE.match(stripped))


def parse_build_order(text: str, replay_id: str, mmr: int | None = None) -> BuildOrder:
    """Parse a whole build-order block, validating monotonic timestamps."""
    entries = []
    header_mmr = mmr
    header_id = replay_id
    last_time = -1
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("#"):
            body = stripped[1:].strip()
            if body.lower().startswith("replay_id:"):
                header_id = body.split(":", 1)[1].strip() or header_id
            elif body.lower().startswith("mmr:"):
                value = body.split(":", 1)[1].strip()
                if value:
                    try:
                        header_mmr = int(value)
                    except ValueError:
                        raise BuildOrderParseError(
                            f"mmr header {value!r} is not an integer", line_no=line_no)
            continue
        if _is_noise(line):
            continue
        entry = parse_line(line, line_no=line_no)
        if entry.time_s < last_time:
            raise OrderingError(
                f"time goes backwards: {entry.time_s}s after {last_time}s",
                line_no=line_no)
        last_time = entry.time_s
        entries.append(entry)
    return BuildOrder(entries=entries, replay_id=header_id, mmr=header_mmr)


@dataclass
class MmrFilterResult:
    kept: list
    dropped_low: int = 0
    dropped_unrated: int = 0


def filter_by_mmr(corpus, threshold: int = 4800) -> MmrFilterResult:
    """Keep build orders with mmr >= threshold; unrated ones are dropped
    and tallied separately."""
    result = MmrFilterResult(kept=[])
    for bo in corpus:
        if bo.mmr is None:
            result.dropped_unrated += 1
        elif bo.mmr < threshold:
            result.dropped_low += 1
        else:
            result.kept.append(bo)
    return result


def action_tokens(bo: BuildOrder) -> list:
    """Action names expanded by count, in build order."""
    tokens = []
    for e in bo.entries:
        tokens.extend([e.action] * e.count)
    return tokens


def ngram_features(bo: BuildOrder, n_max: int) -> dict:
    """Counts of contiguous action n-grams for n = 1..n_max."""
    if n_max < 1:
        raise ValidationError("n_max must be >= 1")
    tokens = action_tokens(bo)
    feats: dict = {}
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            key = " ".join(tokens[i:i + n])
            feats[key] = feats.get(key, 0) + 1
    return feats


# --- corpus serialization ---------------------------------------------------

def to_json_obj(bo: BuildOrder) -> dict:
    return {
        "replay_id": bo.replay_id,
        "mmr": bo.mmr,
        "entries": [
            {"supply": e.supply, "time_s": e.time_s, "action": e.action,
             "count": e.count}
            for e in bo.entries
        ],
    }


def from_json_obj(obj: dict) -> BuildOrder:
    entries = [BuildEntry(supply=e["supply"], time_s=e["time_s"],
                          action=e["action"], count=e["count"])
               for e in obj["entries"]]
    return BuildOrder(entries=entries, replay_id=obj["replay_id"], mmr=obj.get("mmr"))


def write_corpus(path: str, corpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for bo in corpus:
            fh.write(json.dumps(to_json_obj(bo), sort_keys=True) + "\n")


def read_corpus(path: str) -> list:
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                corpus.append(from_json_obj(json.loads(line)))
    return corpus
