"""Command-line entry points.

Every run command resolves its configuration (file values, then --set
overrides), writes the resolved snapshot next to its outputs, and is fully
determined by that snapshot plus the seed.

Exit codes: 0 success, 1 runtime failure (structured error on stderr),
2 argument or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace as dataclass_replace

import numpy as np

from .diffusion import BehaviorModel, behavior_train_step
from .energy import EnergyModel, energy_train_step
from .envs import generate_dataset, load_dataset, make_env_spec, save_dataset
from .errors import StratLabError, InvalidConfigError
from .harness import (
    OFFLINE_STREAMS,
    RunConfig,
    StateNormalizer,
    _load_models,
    _spawn_streams,
    config_from_dict,
    config_to_dict,
    evaluate,
    finetune,
    load_agent_checkpoint,
    load_behavior_checkpoint,
    normalized_score,
    offline_pretrain,
    reference_returns,
)
from .nets import save_checkpoint
from .replay import Batch

CURVE_METRICS = ("eval_return_mean", "normalized_score", "critic_loss", "value_loss",
                 "policy_loss", "diffusion_loss", "energy_loss", "exchange_mean",
                 "exchange_max")


def _parse_override(text: str):
    if "=" not in text:
        raise InvalidConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_overrides(config_dict: dict, overrides):
    for text in overrides or ():
        key, value = _parse_override(text)
        node = config_dict
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    return config_dict


def _load_config(args) -> RunConfig:
    with open(args.config) as f:
        data = json.load(f)
    data = _apply_overrides(data, args.set)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out_dir"] = args.out
    return config_from_dict(data)


def _write_snapshot(out_dir: str, config: RunConfig):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config_to_dict(config), f, sort_keys=True, indent=2)
        f.write("\n")


def cmd_gen_data(args) -> int:
    spec = make_env_spec(args.env)
    ds = generate_dataset(spec, args.quality, args.n, args.gamma, args.seed or 0)
    save_dataset(args.out, ds)
    with open(args.out + ".meta.json", "w") as f:
        json.dump({"env": args.env, "quality": args.quality, "n": args.n,
                   "gamma": args.gamma, "seed": args.seed or 0,
                   "transitions": len(ds)}, f, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(ds)} transitions to {args.out}")
    return 0


def cmd_train_diffusion(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(config.dataset)
    env = config.env
    normalizer = (StateNormalizer.fit(dataset.states) if config.normalize_states
                  else StateNormalizer.identity(env.state_dim))
    streams = _spawn_streams(config.seed, OFFLINE_STREAMS)
    behavior = BehaviorModel.create(env.state_dim, env.action_dim, config.diffusion,
                                    streams["diffusion_init"])
    losses = []
    for _ in range(config.diffusion.train_steps):
        idx = streams["diffusion_loop"].integers(0, len(dataset),
                                                 size=config.diffusion.batch_size)
        mini = Batch(states=normalizer(dataset.states[idx]), actions=dataset.actions[idx],
                     rewards=dataset.rewards[idx],
                     next_states=normalizer(dataset.next_states[idx]),
                     dones=dataset.dones[idx], returns_to_go=dataset.returns_to_go[idx],
                     origins=np.zeros(len(idx), dtype=np.int64), slots=idx)
        losses.append(behavior_train_step(behavior, mini, streams["diffusion_loop"]))
    _write_snapshot(config.out_dir, config)
    arrays = dict(behavior.eps_net.params)
    arrays.update(behavior.optimizer.state_arrays("opt"))
    arrays["norm/mean"] = normalizer.mean
    arrays["norm/std"] = normalizer.std
    save_checkpoint(os.path.join(config.out_dir, "diffusion.ckpt"), arrays)
    print(f"diffusion model trained ({config.diffusion.train_steps} steps, "
          f"final loss {losses[-1]:.4f})" if losses else "diffusion model written")
    return 0


def cmd_train_energy(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(config.dataset)
    env = config.env
    agent, normalizer = load_agent_checkpoint(config, args.checkpoints)
    behavior = load_behavior_checkpoint(config, args.checkpoints)
    streams = _spawn_streams(config.seed, OFFLINE_STREAMS)
    energy = EnergyModel.create(env.state_dim, env.action_dim, config.diffusion.T,
                                config.energy, streams["energy_init"])
    losses = []
    for _ in range(config.energy.train_steps):
        idx = streams["energy_loop"].integers(0, len(dataset), size=config.energy.batch_size)
        losses.append(energy_train_step(
            energy, behavior, lambda s, a: agent.q_min(s, a),
            normalizer(dataset.states[idx]), streams["energy_loop"]))
    _write_snapshot(config.out_dir, config)
    arrays = dict(energy.f_net.params)
    arrays.update(energy.optimizer.state_arrays("opt"))
    save_checkpoint(os.path.join(config.out_dir, "energy.ckpt"), arrays)
    print(f"energy model trained ({config.energy.train_steps} steps, "
          f"final loss {losses[-1]:.4f})" if losses else "energy model written")
    return 0


def cmd_train_offline(args) -> int:
    config = _load_config(args)
    art = offline_pretrain(config)
    final = art.metrics[-1]
    print(f"offline pretraining done: eval return {final['eval_return_mean']:.2f}, "
          f"normalized score {final['normalized_score']:.1f}")
    return 0


def cmd_finetune(args) -> int:
    config = _load_config(args)
    art = finetune(config, args.checkpoints)
    final = [r for r in art.metrics if "event" not in r][-1]
    print(f"fine-tuning done: eval return {final['eval_return_mean']:.2f}, "
          f"normalized score {final['normalized_score']:.1f}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    agent, _, _, normalizer = _load_models(config, args.checkpoints)
    policy = lambda s: agent.act_deterministic(normalizer(s))
    mean, std = evaluate(policy, config.env, args.episodes, config.seed)
    refs = reference_returns(config.env)
    out = {"eval_return_mean": mean, "eval_return_std": std,
           "normalized_score": normalized_score(mean, refs)}
    print(json.dumps(out, sort_keys=True))
    return 0


ABLATION_VARIANTS = ("full", "no-energy", "no-strat", "no-expectile-online")


def _variant_config(config: RunConfig, variant: str) -> RunConfig:
    agent = config.agent
    if variant == "full":
        pass
    elif variant == "no-energy":
        agent = dataclass_replace(agent, use_energy_guidance=False)
    elif variant == "no-strat":
        agent = dataclass_replace(agent, use_stratification=False,
                                  use_energy_guidance=False)
    elif variant == "no-expectile-online":
        agent = dataclass_replace(agent, use_expectile_online=False)
    elif variant.startswith("utd="):
        agent = dataclass_replace(agent, utd=int(variant[4:]))
    elif variant.startswith("nc="):
        raw = variant[3:]
        agent = dataclass_replace(agent, n_c=None if raw == "unlimited" else int(raw))
    else:
        raise InvalidConfigError(
            f"unknown ablation variant {variant!r}; expected one of "
            f"{ABLATION_VARIANTS} or utd=K / nc=K / nc=unlimited")
    out_dir = os.path.join(config.out_dir, variant.replace("=", ""))
    return dataclass_replace(config, agent=agent, out_dir=out_dir)


def cmd_ablate(args) -> int:
    config = _load_config(args)
    variant = _variant_config(config, args.variant)
    art = finetune(variant, args.checkpoints)
    final = [r for r in art.metrics if "event" not in r][-1]
    print(f"ablation {args.variant}: eval return {final['eval_return_mean']:.2f}, "
          f"normalized score {final['normalized_score']:.1f}")
    return 0


def _read_metrics(run_dir: str):
    path = os.path.join(run_dir, "metrics.log")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def cmd_plot(args) -> int:
    runs = [_read_metrics(d) for d in args.runs]
    os.makedirs(args.out, exist_ok=True)
    for metric in CURVE_METRICS:
        per_step = {}
        for records in runs:
            for rec in records:
                if "event" in rec or rec.get(metric) is None:
                    continue
                per_step.setdefault(rec["global_step"], []).append(rec[metric])
        if not per_step:
            continue
        with open(os.path.join(args.out, f"{metric}.tsv"), "w") as f:
            f.write("step\tmean\tstd\tn\n")
            for step in sorted(per_step):
                vals = np.asarray(per_step[step], dtype=np.float64)
                f.write(f"{step}\t{vals.mean():.10g}\t{vals.std():.10g}\t{len(vals)}\n")
    finals = []
    with open(os.path.join(args.out, "summary.tsv"), "w") as f:
        f.write("run\tfinal_normalized_score\n")
        for run_dir, records in zip(args.runs, runs):
            online = [r for r in records if r.get("phase") == "online"
                      and "event" not in r]
            pool = online if online else [r for r in records if "event" not in r]
            score = pool[-1]["normalized_score"]
            finals.append(score)
            f.write(f"{run_dir}\t{score:.10g}\n")
        arr = np.asarray(finals)
        f.write(f"aggregate\t{arr.mean():.10g} +- {arr.std():.10g}\n")
    print(f"wrote curves for {len(args.runs)} runs to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratlab",
        description="Offline-to-online RL lab with energy-guided diffusion "
                    "stratification on toy pointmass control.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_config_opts(p, checkpoints=False):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-key config override (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory override")
        if checkpoints:
            p.add_argument("--checkpoints", required=True,
                           help="directory with pretrained checkpoints")

    p = sub.add_parser("gen-data", help="generate an offline dataset file")
    p.add_argument("--env", required=True, choices=("pointmass-dense", "pointmass-sparse"))
    p.add_argument("--quality", required=True, choices=("expert", "medium", "random"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-diffusion", help="train the behavior model alone")
    add_config_opts(p)
    p.set_defaults(fn=cmd_train_diffusion)

    p = sub.add_parser("train-energy", help="train the energy net against a checkpointed Q")
    add_config_opts(p, checkpoints=True)
    p.set_defaults(fn=cmd_train_energy)

    p = sub.add_parser("train-offline", help="full offline pretraining")
    add_config_opts(p)
    p.set_defaults(fn=cmd_train_offline)

    p = sub.add_parser("finetune", help="online fine-tuning from checkpoints")
    add_config_opts(p, checkpoints=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpointed policy")
    add_config_opts(p, checkpoints=True)
    p.add_argument("--episodes", type=int, default=20)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation variant of fine-tuning")
    add_config_opts(p, checkpoints=True)
    p.add_argument("--variant", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="aggregate metrics logs into curve files")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 2
    except StratLabError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
