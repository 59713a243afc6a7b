"""Command-line entry point: parse, label, train, eval, report.

Every subcommand is deterministic given (inputs, config, seed); run
manifests capture the config snapshot, seed, and input hashes so an
artifact directory can be reproduced bit-identically (timestamps live only
in the manifest). Exit codes: 0 success, 1 evaluation/validation failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time

from . import __version__
from .buildorder import filter_by_mmr, parse_build_order, read_corpus, write_corpus
from .errors import ConfigError, TacticraftError
from .labeler import ClassifierEndpoint, default_rules, label_corpus, load_rules
from .policy import PolicyConfig, init_base, load_base, save_base
from .synth import default_scripts, evaluate_modulation, generate_dataset, \
    head_divergence_profile, load_scripts, pretrain_base, write_report
from .trainer import TrainConfig, kl_preset, load_adapters, train

ENV_PREFIX = "TACTICRAFT_"

_INT_KEYS = {"seed", "warm_up_steps", "steps", "lr_decay_interval", "batch_size",
             "trajectory_length", "save_ckpt_freq", "adaptor.tactic_dim",
             "data.n_trajectories", "base.pretrain_steps"}
_FLOAT_KEYS = {"learning_rate", "weight_decay", "lr_decay", "grad_clip.threshold"}
_STR_KEYS = {"grad_clip.type", "kl_direction", "head_weights",
             "adaptor.fusion_method", "adaptor.active_adaptors",
             "base.checkpoint", "data.scripts"}
_BOOL_KEYS = {"use_warmup"}
_PREFIX_KEYS = ("head_weights.", "loss_weight.")


def parse_config_file(path: str) -> dict:
    """Flat `key = value` lines with dotted keys; '#' starts a comment."""
    raw = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {line_no}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
    return raw


def apply_env_overrides(raw: dict, environ=None) -> dict:
    """TACTICRAFT_<KEY> overrides, with '.' spelled as '__'."""
    environ = os.environ if environ is None else environ
    out = dict(raw)
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = value
    return out


def _parse_bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {value!r}")


def validate_config(raw: dict) -> dict:
    """Type-check the flat config; unknown keys are an error listing them."""
    known = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _BOOL_KEYS
    unknown = [k for k in raw
               if k not in known and not any(k.startswith(p) for p in _PREFIX_KEYS)]
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, value in raw.items():
        try:
            if key in _INT_KEYS:
                out[key] = int(value)
            elif key in _FLOAT_KEYS or any(key.startswith(p) for p in _PREFIX_KEYS):
                out[key] = float(value)
            elif key in _BOOL_KEYS:
                out[key] = _parse_bool(value)
            else:
                out[key] = value
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    return out


def build_train_config(cfg: dict, preset_override: str | None = None) -> TrainConfig:
    kwargs = {}
    direct = {
        "seed": "seed", "learning_rate": "learning_rate",
        "weight_decay": "weight_decay", "warm_up_steps": "warm_up_steps",
        "steps": "total_steps", "lr_decay": "lr_decay",
        "lr_decay_interval": "lr_decay_interval", "batch_size": "batch_size",
        "trajectory_length": "trajectory_length",
        "save_ckpt_freq": "save_ckpt_freq", "kl_direction": "kl_direction",
        "grad_clip.type": "grad_clip_kind",
        "grad_clip.threshold": "grad_clip_threshold",
        "adaptor.fusion_method": "fusion_method",
        "adaptor.tactic_dim": "tactic_dim",
    }
    for key, attr in direct.items():
        if key in cfg:
            kwargs[attr] = cfg[key]
    if cfg.get("use_warmup") is False:
        kwargs["warm_up_steps"] = 0
    if "adaptor.active_adaptors" in cfg:
        kwargs["active_adapters"] = tuple(
            s.strip() for s in cfg["adaptor.active_adaptors"].split(",") if s.strip())

    preset = preset_override or cfg.get("head_weights")
    explicit = {k.split(".", 1)[1]: v for k, v in cfg.items()
                if k.startswith("head_weights.")}
    if preset is not None and explicit:
        raise ConfigError("give either a head_weights preset or explicit "
                          "head_weights.<head> entries, not both")
    if preset is not None:
        kwargs["kl_head_weights"] = kl_preset(preset)
    elif explicit:
        kwargs["kl_head_weights"] = explicit
    bc = {k.split(".", 1)[1]: v for k, v in cfg.items()
          if k.startswith("loss_weight.")}
    if bc:
        kwargs["bc_head_weights"] = bc
    return TrainConfig(**kwargs)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, config: dict, seed: int, inputs: list,
                   argv: list) -> None:
    manifest = {
        "tool_version": __version__,
        "created_unix": time.time(),
        "seed": seed,
        "argv": argv,
        "config": {k: config[k] for k in sorted(config)},
        "inputs": {p: _sha256(p) for p in inputs if p and os.path.isfile(p)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


# --- subcommands -------------------------------------------------------------

def cmd_parse(args) -> int:
    if not os.path.isdir(args.in_dir):
        print(f"error: input directory {args.in_dir!r} not found", file=sys.stderr)
        return 2
    corpus = []
    stats = {"parsed": 0, "failed": 0}
    for name in sorted(os.listdir(args.in_dir)):
        path = os.path.join(args.in_dir, name)
        if not os.path.isfile(path) or name.startswith("."):
            continue
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
            bo = parse_build_order(text, replay_id=os.path.splitext(name)[0])
            corpus.append(bo)
            stats["parsed"] += 1
        except TacticraftError as exc:
            stats["failed"] += 1
            print(f"warning: {name}: {exc}", file=sys.stderr)
    corpus.sort(key=lambda bo: bo.replay_id)
    result = filter_by_mmr(corpus, threshold=args.min_mmr)
    write_corpus(args.out_corpus, result.kept)
    stats.update({"kept": len(result.kept),
                  "dropped_low_mmr": result.dropped_low,
                  "dropped_unrated": result.dropped_unrated})
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_label(args) -> int:
    if not os.path.isfile(args.corpus):
        print(f"error: corpus {args.corpus!r} not found", file=sys.stderr)
        return 2
    if args.mode == "endpoint" and not args.endpoint_url:
        print("error: --mode endpoint requires --endpoint-url", file=sys.stderr)
        return 2
    corpus = read_corpus(args.corpus)
    rules = load_rules(args.rules) if args.rules else default_rules()
    endpoint = None
    if args.mode == "endpoint":
        endpoint = ClassifierEndpoint(base_url=args.endpoint_url,
                                      timeout_s=args.timeout,
                                      retries=args.retries)
    summary = label_corpus(corpus, strategy="rules" if args.mode == "rules"
                           else "endpoint", out_path=args.out_labels,
                           rules=rules, endpoint=endpoint,
                           temperature=args.temperature,
                           max_in_flight=args.max_in_flight)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    raw = apply_env_overrides(parse_config_file(args.config))
    cfg_dict = validate_config(raw)
    cfg = build_train_config(cfg_dict, preset_override=args.preset)

    scripts_path = args.data or cfg_dict.get("data.scripts")
    scripts = load_scripts(scripts_path) if scripts_path else default_scripts()
    n_traj = cfg_dict.get("data.n_trajectories", 900)
    dataset, _ = generate_dataset(scripts, n_traj, cfg.trajectory_length,
                                  cfg.seed, labels_path=None)

    if cfg_dict.get("base.checkpoint"):
        base = load_base(cfg_dict["base.checkpoint"])
    elif cfg_dict.get("base.pretrain_steps", 0) > 0:
        base, _ = pretrain_base(dataset, cfg_dict["base.pretrain_steps"], cfg.seed)
    else:
        base = init_base(cfg.seed, PolicyConfig())

    os.makedirs(args.out_dir, exist_ok=True)
    save_base(os.path.join(args.out_dir, "base"), base)
    write_manifest(args.out_dir, cfg_dict, cfg.seed,
                   inputs=[args.config, scripts_path or ""],
                   argv=["train", args.config, str(args.data), args.out_dir])

    adapters, metrics = train(dataset, base, cfg, args.out_dir,
                              resume_from=args.resume)
    from .trainer import AdamW, GradClipState, save_train_state
    final_dir = os.path.join(args.out_dir, "adapters_final")
    save_train_state(final_dir, adapters,
                     AdamW(adapters.trainable_tensors()), GradClipState(),
                     step=cfg.total_steps)
    last = metrics[-1] if metrics else {}
    print(json.dumps({"steps": len(metrics), "final_loss": last.get("loss"),
                      "out_dir": args.out_dir}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    try:
        base = load_base(args.base_ckpt)
        adapters = load_adapters(args.adapter_ckpt, base.config)
        scripts = load_scripts(args.scripts) if args.scripts else default_scripts()
        report = evaluate_modulation(base, adapters, scripts,
                                     n_eval=args.n_eval, seed=args.seed)
        profile = head_divergence_profile(base, adapters, n_eval=args.n_eval,
                                          seed=args.seed)
    except TacticraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report.per_head_kl = profile
    if args.out_report:
        write_report(args.out_report, report)
    print(report.render_text())
    return 0 if report.diagonal_dominant else 1


def _metric_rows(path: str) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def cmd_report(args) -> int:
    heads = ("action_type", "delay", "queued", "selected_units",
             "target_unit", "location")
    tables = {}
    for path in args.metrics:
        if not os.path.isfile(path):
            print(f"error: metrics file {path!r} not found", file=sys.stderr)
            return 2
        rows = _metric_rows(path)
        if not rows:
            print(f"error: metrics file {path!r} is empty", file=sys.stderr)
            return 2
        tables[path] = rows

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["file", "step", "lr", "loss", "grad_norm"]
                    + [f"bc_{h}" for h in heads] + [f"kl_{h}" for h in heads])
    for path in args.metrics:
        for row in tables[path]:
            writer.writerow([path, row["step"], repr(row["lr"]),
                             repr(row["loss"]), repr(row["grad_norm"])]
                            + [repr(row["bc"][h]) for h in heads]
                            + [repr(row["kl"][h]) for h in heads])
    csv_text = buf.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)

    lines = ["final-step summary:"]
    finals = {path: tables[path][-1] for path in args.metrics}
    for path in args.metrics:
        row = finals[path]
        lines.append(f"  {path}: step {row['step']} loss {row['loss']:.4f}")
        for h in heads:
            lines.append(f"    kl_{h:<16s} {row['kl'][h]:.6f}")
    if len(args.metrics) >= 2:
        first = finals[args.metrics[0]]
        for other in args.metrics[1:]:
            row = finals[other]
            flags = [f"{h}:{'<=' if row['kl'][h] <= first['kl'][h] else '>'}"
                     for h in heads]
            lines.append(f"  kl({other}) vs kl({args.metrics[0]}): "
                         + " ".join(flags))
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tacticraft",
                                description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("parse", help="parse a directory of build-order text files")
    sp.add_argument("in_dir")
    sp.add_argument("out_corpus")
    sp.add_argument("--min-mmr", type=int, default=4800)
    sp.set_defaults(func=cmd_parse)

    sl = sub.add_parser("label", help="label a corpus with tactic distributions")
    sl.add_argument("corpus")
    sl.add_argument("out_labels")
    sl.add_argument("--mode", choices=("rules", "endpoint"), default="rules")
    sl.add_argument("--endpoint-url")
    sl.add_argument("--rules", help="rule file (default: packaged rules)")
    sl.add_argument("--temperature", type=float, default=1.0)
    sl.add_argument("--timeout", type=float, default=10.0)
    sl.add_argument("--retries", type=int, default=2)
    sl.add_argument("--max-in-flight", type=int, default=4)
    sl.set_defaults(func=cmd_label)

    st = sub.add_parser("train", help="train adapters on synthetic trajectories")
    st.add_argument("config")
    st.add_argument("out_dir")
    st.add_argument("--data", help="archetype scripts file (default: packaged)")
    st.add_argument("--preset", choices=tuple("ABCD"),
                    help="override the KL head-weight preset")
    st.add_argument("--resume", help="checkpoint directory to resume from")
    st.set_defaults(func=cmd_train)

    se = sub.add_parser("eval", help="measure tactical modulation of adapters")
    se.add_argument("base_ckpt")
    se.add_argument("adapter_ckpt")
    se.add_argument("--scripts", help="archetype scripts file (default: packaged)")
    se.add_argument("--out-report")
    se.add_argument("--n-eval", type=int, default=4096)
    se.add_argument("--seed", type=int, default=0)
    se.set_defaults(func=cmd_eval)

    sr = sub.add_parser("report", help="consolidate metrics logs")
    sr.add_argument("metrics", nargs="+")
    sr.add_argument("--out", help="CSV output path")
    sr.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TacticraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
