"""Assign tactic distributions to build orders.

Two strategies: a deterministic rule-based scorer (the offline oracle), and
a pluggable HTTP+JSON classifier client that extracts per-category token
log-probabilities from a completion-style endpoint. Both normalize through
the same softmax and emit identical label-file records.
"""

from __future__ import annotations

import json
import shlex
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .buildorder import BuildOrder
from .errors import ConfigError, EndpointError, ProtocolError, ValidationError
from .taxonomy import TACTIC_DIM, LabeledReplay, TacticDistribution, softmax_normalize

RULE_KINDS = ("contains", "count_at_least", "before", "nth_before",
              "supply_at_most", "absent")


@dataclass(frozen=True)
class Rule:
    category: int
    kind: str
    weight: float
    action: str = ""
    count: int = 1
    time_s: int = 0
    supply: int = 0
    n: int = 1


@dataclass
class RuleSet:
    rules: list = field(default_factory=list)
    unclassified_prior: float = 1.0
    short_bonus: float = 2.0
    short_max_len: int = 3

    def __post_init__(self):
        covered = {r.category for r in self.rules}
        missing = [k for k in range(1, TACTIC_DIM) if k not in covered]
        if missing:
            raise ConfigError(f"rule set has no rules for categories {missing}")
        for r in self.rules:
            if r.kind not in RULE_KINDS:
                raise ConfigError(f"unknown rule kind {r.kind!r}")
            if not 0 <= r.category < TACTIC_DIM:
                raise ConfigError(f"rule category {r.category} outside [0, 8]")


def _occurrences(bo: BuildOrder, action: str):
    """(entry, cumulative token count before this entry) for matching entries."""
    total = 0
    for e in bo.entries:
        if e.action == action:
            yield e, total
            total += e.count


def _rule_satisfied(rule: Rule, bo: BuildOrder) -> bool:
    if rule.kind == "contains":
        return any(True for _ in _occurrences(bo, rule.action))
    if rule.kind == "absent":
        return not any(True for _ in _occurrences(bo, rule.action))
    if rule.kind == "count_at_least":
        total = sum(e.count for e in bo.entries if e.action == rule.action)
        return total >= rule.count
    if rule.kind == "before":
        for e, _ in _occurrences(bo, rule.action):
            return e.time_s <= rule.time_s
        return False
    if rule.kind == "supply_at_most":
        for e, _ in _occurrences(bo, rule.action):
            return e.supply <= rule.supply
        return False
    if rule.kind == "nth_before":
        # nth occurrence counted with ×k expansion
        for e, seen in _occurrences(bo, rule.action):
            if seen + e.count >= rule.n:
                return e.time_s <= rule.time_s
        return False
    raise ConfigError(f"unknown rule kind {rule.kind!r}")


def score_rules(bo: BuildOrder, rules: RuleSet) -> np.ndarray:
    """Deterministic raw scores, one per category."""
    scores = np.zeros(TACTIC_DIM)
    scores[0] = rules.unclassified_prior
    if len(bo.entries) < rules.short_max_len:
        scores[0] += rules.short_bonus
    for rule in rules.rules:
        if _rule_satisfied(rule, bo):
            scores[rule.category] += rule.weight
    return scores


def label_rule_based(bo: BuildOrder, rules: RuleSet,
                     temperature: float = 1.0) -> TacticDistribution:
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    return softmax_normalize(score_rules(bo, rules) / temperature)


# --- rule file format -------------------------------------------------------
#   prior <weight>
#   short_bonus <weight> max_len=<k>
#   rule <category> <kind> weight=<w> [action="Name"] [count=k] [time_s=t]
#        [supply=s] [n=k]

def parse_rules(text: str) -> RuleSet:
    rules = []
    prior, short_bonus, short_max_len = 1.0, 2.0, 3
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            parts = shlex.split(line)
        except ValueError as exc:
            raise ConfigError(f"rules line {line_no}: {exc}") from exc
        head = parts[0]
        if head == "prior":
            prior = float(parts[1])
            continue
        if head == "short_bonus":
            short_bonus = float(parts[1])
            for kv in parts[2:]:
                k, v = kv.split("=", 1)
                if k == "max_len":
                    short_max_len = int(v)
            continue
        if head != "rule" or len(parts) < 4:
            raise ConfigError(f"rules line {line_no}: expected "
                              f"'rule <cat> <kind> key=value...', got {line!r}")
        kwargs = {"category": int(parts[1]), "kind": parts[2]}
        for kv in parts[3:]:
            if "=" not in kv:
                raise ConfigError(f"rules line {line_no}: bad token {kv!r}")
            k, v = kv.split("=", 1)
            if k == "action":
                kwargs["action"] = v
            elif k in ("count", "time_s", "supply", "n"):
                kwargs[k] = int(v)
            elif k == "weight":
                kwargs["weight"] = float(v)
            else:
                raise ConfigError(f"rules line {line_no}: unknown key {k!r}")
        if "weight" not in kwargs:
            raise ConfigError(f"rules line {line_no}: rule needs a weight")
        rules.append(Rule(**kwargs))
    return RuleSet(rules=rules, unclassified_prior=prior,
                   short_bonus=short_bonus, short_max_len=short_max_len)


def load_rules(path: str) -> RuleSet:
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh.read())


def default_rules() -> RuleSet:
    from importlib.resources import files
    return parse_rules(files("tacticraft.data").joinpath("rules.txt").read_text())


# --- endpoint client --------------------------------------------------------

DEFAULT_CATEGORY_TOKENS = tuple(str(i) for i in range(TACTIC_DIM))

DEFAULT_PROMPT = (
    "Classify the following ZvZ build order into one tactical category.\n"
    "Answer with a single digit 0-8.\n\n{build_order}\n\nCategory:")


@dataclass
class ClassifierEndpoint:
    base_url: str
    model: str = "classifier"
    prompt_template: str = DEFAULT_PROMPT
    category_tokens: tuple = DEFAULT_CATEGORY_TOKENS
    timeout_s: float = 10.0
    retries: int = 2

    def __post_init__(self):
        if self.retries < 0:
            raise ConfigError("retry budget must be >= 0")
        if self.timeout_s <= 0:
            raise ConfigError("timeout must be positive")
        if len(self.category_tokens) != TACTIC_DIM:
            raise ConfigError(f"need {TACTIC_DIM} category tokens")


def render_build_order(bo: BuildOrder) -> str:
    lines = []
    for e in bo.entries:
        suffix = f" x{e.count}" if e.count > 1 else ""
        lines.append(f"{e.supply} {e.time_s // 60}:{e.time_s % 60:02d} "
                     f"{e.action}{suffix}")
    return "\n".join(lines)


def _post_json(url: str, payload: dict, timeout: float) -> dict:
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(
        url, data=body, headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


def label_via_endpoint(bo: BuildOrder, ep: ClassifierEndpoint) -> TacticDistribution:
    """Query per-category token log-probs from the endpoint and normalize.

    Categories whose token is missing from the response get
    min(observed log-probs) - ln(9) before normalization. Network failures
    are retried up to the endpoint's budget; protocol violations are not.
    """
    payload = {
        "model": ep.model,
        "prompt": ep.prompt_template.format(build_order=render_build_order(bo)),
        "logprobs": True,
        "top_logprobs": max(16, TACTIC_DIM),
    }
    last_err = None
    for _ in range(ep.retries + 1):
        try:
            response = _post_json(ep.base_url, payload, ep.timeout_s)
            break
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last_err = exc
            continue
    else:
        raise EndpointError(
            f"endpoint unreachable after {ep.retries + 1} attempts: {last_err}",
            replay_id=bo.replay_id)

    try:
        token_entries = response["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        observed = {str(t["token"]): float(t["logprob"]) for t in token_entries}
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ProtocolError(f"unexpected response shape: {exc}",
                            replay_id=bo.replay_id) from exc
    if not observed:
        raise ProtocolError("response carried no token log-probs",
                            replay_id=bo.replay_id)
    fallback = min(observed.values()) - np.log(TACTIC_DIM)
    logprobs = np.array([observed.get(tok, fallback)
                         for tok in ep.category_tokens])
    return softmax_normalize(logprobs)


# --- corpus labeling --------------------------------------------------------

def write_labels(path: str, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(json.dumps(
                {"replay_id": lab.replay_id, "tactic_dist": lab.tactic.tolist()},
                sort_keys=True) + "\n")


def read_labels(path: str) -> list:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                labels.append(LabeledReplay(
                    obj["replay_id"], TacticDistribution(obj["tactic_dist"])))
    return labels


def label_corpus(corpus, strategy: str, out_path: str, rules: RuleSet | None = None,
                 endpoint: ClassifierEndpoint | None = None,
                 temperature: float = 1.0, max_in_flight: int = 4) -> dict:
    """Label every build order, writing labels in corpus order.

    Per-item failures are recorded and the batch continues. Returns a
    summary with per-category argmax counts, mean entropy, and failures.
    """
    if strategy == "rules":
        rules = rules or default_rules()
        results = [(bo.replay_id, label_rule_based(bo, rules, temperature), None)
                   for bo in corpus]
    elif strategy == "endpoint":
        if endpoint is None:
            raise ConfigError("endpoint strategy requires a ClassifierEndpoint")

        def one(bo):
            try:
                return bo.replay_id, label_via_endpoint(bo, endpoint), None
            except (EndpointError, ProtocolError) as exc:
                return bo.replay_id, None, str(exc)

        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            results = list(pool.map(one, corpus))
    else:
        raise ConfigError(f"unknown labeling strategy {strategy!r}")

    labels = [LabeledReplay(rid, dist) for rid, dist, err in results if err is None]
    failures = [{"replay_id": rid, "error": err}
                for rid, _, err in results if err is not None]
    write_labels(out_path, labels)

    counts = {k: 0 for k in range(TACTIC_DIM)}
    for lab in labels:
        counts[lab.tactic.argmax()] += 1
    mean_entropy = float(np.mean([lab.tactic.entropy() for lab in labels])) \
        if labels else 0.0
    return {
        "n_labeled": len(labels),
        "n_failed": len(failures),
        "argmax_counts": counts,
        "mean_entropy": mean_entropy,
        "failures": failures,
    }
