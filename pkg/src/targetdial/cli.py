"""Operator command line: corpus generation, training, evaluation, simulation.

Every command writes into a run directory together with the resolved
configuration, so a run can be re-executed bit-identically. Verbosity
comes from the TARGETDIAL_LOG environment variable (debug/info/warning).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, inference, metrics, presets, synth
from . import model as mdl
from . import simulator as sim
from . import training
from .corpus import load_corpus, save_corpus, split
from .errors import ConfigurationError, TargetDialError

log = logging.getLogger("targetdial")

_EXIT_CODES = {
    "usage": 2,
    "configuration": 3,
    "validation": 4,
    "parse": 5,
    "dimension": 6,
    "numeric": 7,
    "contract": 8,
    "state": 9,
    "metric": 10,
    "io": 11,
}


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("TARGETDIAL_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s")


def _load_scenario(args, kind="corpus"):
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        return presets.load_scenario(path)
    if kind == "simulator":
        return presets.simulator_scenario()
    return presets.corpus_scenario()


def _run_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out_dir, args, scenario=None, extra=None):
    resolved = {k: v for k, v in vars(args).items() if k not in ("func",)}
    if scenario is not None:
        resolved["scenario"] = presets.scenario_to_dict(scenario)
    if extra:
        resolved.update(extra)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)


def cmd_gen_corpus(args):
    scenario = _load_scenario(args)
    out_dir = _run_dir(args)
    config = scenario.synthetic_config(
        n_dialogues=args.n_dialogues, intent_noise=args.intent_noise
    )
    meta, dialogues = synth.generate_corpus(config, seed=args.seed)
    path = out_dir / "corpus.jsonl"
    save_corpus(path, meta, dialogues)
    _echo_config(out_dir, args, scenario)
    log.info("wrote %d dialogues to %s", len(dialogues), path)
    return 0


def _train_settings(args, meta):
    overrides = {}
    if args.train_config:
        path = Path(args.train_config)
        if not path.exists():
            raise UsageError(f"train config {path} does not exist")
        with open(path, encoding="utf-8") as fh:
            overrides = json.load(fh)
    model_kw = overrides.get("model", {})
    train_kw = overrides.get("train", {})
    if args.loss_weight is not None:
        model_kw["loss_weight"] = args.loss_weight
    model_config = mdl.ModelConfig.for_corpus(meta, **model_kw)
    train_kw.setdefault("seed", args.seed)
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    train_config = mdl.TrainConfig(**train_kw)
    return model_config, train_config


def cmd_train(args):
    meta, dialogues = load_corpus(args.corpus)
    out_dir = _run_dir(args)
    model_config, train_config = _train_settings(args, meta)
    params, history = training.train(dialogues, model_config, train_config)
    mdl.save_params(out_dir / "checkpoint.json", params)
    with open(out_dir / "loss_log.jsonl", "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    _echo_config(
        out_dir,
        args,
        extra={"model_config": model_config.to_dict(), "train_config": train_config.to_dict()},
    )
    log.info("checkpoint written to %s", out_dir / "checkpoint.json")
    return 0


def cmd_evaluate(args):
    meta, dialogues = load_corpus(args.corpus)
    params = mdl.load_params(args.checkpoint)
    out_dir = _run_dir(args)
    report = metrics.evaluate_model(params, dialogues, n_bins=args.n_bins, method="model")
    reports = [report]
    if args.with_random:
        reports.append(
            metrics.evaluate_model("random", dialogues, n_bins=args.n_bins, seed=args.seed)
        )
    text = metrics.format_report(reports)
    print(text)
    (out_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    metrics.save_reports(out_dir / "report.jsonl", reports)
    _echo_config(out_dir, args)
    return 0


def _policies_for(names, scenario, params):
    policies = []
    for name in names:
        if name == "model":
            policies.append(
                inference.StrategyEngine(
                    params, scenario.candidates, scenario.templates, scenario.rules
                )
            )
        elif name == "bc":
            policies.append(
                baselines.CloningPolicy(
                    params, scenario.candidates, scenario.templates, scenario.rules
                )
            )
        elif name == "flow":
            policies.append(baselines.FlowPolicy(scenario.flow_graph, scenario.candidates))
        elif name == "random":
            policies.append(baselines.RandomPolicy(scenario.candidates, scenario.rules))
        else:
            raise UsageError(f"unknown policy {name!r}")
    return policies


def cmd_simulate(args):
    scenario = _load_scenario(args, kind="simulator")
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    params = None
    if any(n in ("model", "bc") for n in names):
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for the model/bc policies")
        params = mdl.load_params(args.checkpoint)
    out_dir = _run_dir(args)
    policies = _policies_for(names, scenario, params)
    if args.theta is not None:
        for pol in policies:
            if isinstance(pol, inference.StrategyEngine):
                pol.theta = args.theta
    rows = []
    all_logs = []
    for pol in policies:
        stats, logs = sim.estimate_return(
            scenario.user_model, pol, args.episodes, seed=args.seed, keep_logs=True
        )
        rows.append(stats)
        if args.save_episodes:
            all_logs.extend(logs)
        log.info(
            "%s: repayment=%.4f±%.4f rounds=%.2f diversity=%.3f±%.3f",
            stats.policy_name,
            stats.repayment_rate,
            stats.repayment_se,
            stats.mean_rounds,
            stats.diversity,
            stats.diversity_se,
        )
    lines = [
        f"{'policy':<16} {'repayment':>10} {'se':>7} {'rounds':>7} {'diversity':>10} {'se':>7}"
    ]
    for s in rows:
        lines.append(
            f"{s.policy_name:<16} {s.repayment_rate:>10.4f} {s.repayment_se:>7.4f} "
            f"{s.mean_rounds:>7.2f} {s.diversity:>10.4f} {s.diversity_se:>7.4f}"
        )
    if args.oracle:
        best, per_segment = sim.brute_force_optimal(
            scenario.user_model, scenario.candidates, depth=scenario.user_model.t_max
        )
        lines.append(f"brute-force optimal return: {best:.4f}")
        for z, info in sorted(per_segment.items()):
            lines.append(f"  segment {z}: {info['return']:.4f} via {list(info['sequence'])}")
    text = "\n".join(lines)
    print(text)
    (out_dir / "simulation.txt").write_text(text + "\n", encoding="utf-8")
    with open(out_dir / "simulation.jsonl", "w", encoding="utf-8") as fh:
        for s in rows:
            fh.write(json.dumps(s.__dict__, sort_keys=True) + "\n")
    if args.save_episodes:
        with open(out_dir / "episodes.jsonl", "w", encoding="utf-8") as fh:
            for ep in all_logs:
                fh.write(
                    json.dumps(
                        {
                            "policy": ep.policy_name,
                            "segment": ep.segment,
                            "path": list(ep.path),
                            "outcome": ep.outcome,
                            "rounds": ep.rounds,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    _echo_config(out_dir, args, scenario)
    return 0


def cmd_ablate(args):
    scenario = _load_scenario(args)
    out_dir = _run_dir(args)
    if args.corpus:
        meta, dialogues = load_corpus(args.corpus)
    else:
        config = scenario.synthetic_config(n_dialogues=args.n_dialogues)
        meta, dialogues = synth.generate_corpus(config, seed=args.seed)
        save_corpus(out_dir / "corpus.jsonl", meta, dialogues)
    train_set, test_set = split(dialogues, (0.8, 0.2), seed=args.seed)
    log.info("ablation grid on %d train / %d test dialogues", len(train_set), len(test_set))

    variants = [
        ("full-model", {}),
        ("no-user-features", {"no_user_features": True}),
        ("single-task", {"single_task": True}),
        ("no-attention", {"no_attention_aggregation": True}),
    ]
    reports = [
        metrics.evaluate_model(
            "random", test_set, n_bins=args.n_bins, method="flow/bc-random", seed=args.seed
        )
    ]
    user_only = baselines.train_user_only(train_set, meta, seed=args.seed)
    reports.append(
        metrics.evaluate_model(
            user_only.predict, test_set, n_bins=args.n_bins, method="user-only"
        )
    )
    for name, flags in variants:
        model_config = mdl.ModelConfig.for_corpus(
            meta, embed_dim=args.embed_dim, hidden_dim=args.hidden_dim, n_buckets=4, **flags
        )
        train_config = mdl.TrainConfig(
            learning_rate=args.learning_rate, epochs=args.epochs, seed=args.seed
        )
        params, _ = training.train(train_set, model_config, train_config)
        mdl.save_params(out_dir / f"checkpoint_{name}.json", params)
        reports.append(
            metrics.evaluate_model(params, test_set, n_bins=args.n_bins, method=name)
        )
        log.info("trained %s", name)
    text = metrics.format_report(reports)
    print(text)
    (out_dir / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    metrics.save_reports(out_dir / "ablation.jsonl", reports)
    _echo_config(out_dir, args, scenario)
    return 0


def cmd_chat(args):
    scenario = _load_scenario(args)
    params = mdl.load_params(args.checkpoint)
    engine = inference.StrategyEngine(
        params,
        scenario.candidates,
        scenario.templates,
        scenario.rules,
        theta=args.theta,
    )
    aliases = {name: i for i, name in enumerate(presets.INTENT_NAMES)}
    print("You play the debtor. Type an intent id or name (blank line or EOF quits).")
    print("Intents: " + ", ".join(f"{i}={n}" for i, n in enumerate(presets.INTENT_NAMES)))
    profile = scenario.user_model.sample_profile(
        0, np.random.Generator(np.random.PCG64(args.seed))
    )
    session = engine.new_session(profile)
    while not session.terminated:
        try:
            raw = input("intent> ").strip()
        except EOFError:
            break
        if not raw:
            break
        if raw in aliases:
            intent = aliases[raw]
        else:
            try:
                intent = int(raw)
            except ValueError:
                print(f"unknown intent {raw!r}")
                continue
        if not 0 <= intent < scenario.user_model.intent_vocab:
            print(f"intent must be in [0, {scenario.user_model.intent_vocab})")
            continue
        result = engine.act(session, intent)
        name = presets.STRATEGY_NAMES.get(result.strategy_id, str(result.strategy_id))
        print(f"robot[{name}]: {result.script}")
        if intent in scenario.user_model.hangup_intents:
            session.terminate()
            print("(caller hung up)")
        elif result.terminal:
            print("(call closed)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="targetdial", description="Target-driven dialogue strategy selection toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus with planted effects")
    p.add_argument("--config", help="scenario JSON (defaults to the built-in corpus scenario)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/gen-corpus")
    p.add_argument("--n-dialogues", type=int, default=25000)
    p.add_argument("--intent-noise", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the dual-head model on a corpus file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-config", help="JSON with {model: {...}, train: {...}} overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--loss-weight", dest="loss_weight", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="offline ranking metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n-bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-random", action="store_true")
    p.add_argument("--out", default="runs/evaluate")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="compare policies against the user simulator")
    p.add_argument("--config", help="scenario JSON (defaults to the built-in simulator scenario)")
    p.add_argument("--checkpoint")
    p.add_argument("--policies", default="model,bc,flow")
    p.add_argument("--episodes", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--oracle", action="store_true", help="include the brute-force optimum")
    p.add_argument("--save-episodes", action="store_true")
    p.add_argument("--out", default="runs/simulate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ablate", help="train and evaluate the model-variant grid")
    p.add_argument("--config", help="scenario JSON (defaults to the built-in corpus scenario)")
    p.add_argument("--corpus", help="reuse an existing corpus file instead of generating")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--n-dialogues", type=int, default=25000)
    p.add_argument("--n-bins", type=int, default=10)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--learning-rate", type=float, default=3e-3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("chat", help="interactive console: you type intents, the robot replies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="scenario JSON (defaults to the built-in corpus scenario)")
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_chat)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return _EXIT_CODES["usage"]
    except TargetDialError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return _EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return _EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
