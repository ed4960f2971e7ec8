"""Command-line entry point: ``alm {train,eval,verify,bias,diagnose,bench}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .agent import Agent
from .errors import ALMError, ContractError, NumericError
from .experience import ReplayBuffer, Transition
from .harness.analysis import bias_analysis, latent_divergence
from .harness.config import ConfigError, load_config
from .harness.train import env_for_checkpoint, env_from_config, evaluate, train, tune_allocator
from .harness.verify import run_verify

log = logging.getLogger("alm")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    p.add_argument("--out", help="output directory or file (overrides run.out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint with the noise-free policy")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("verify", help="exact tabular checks on random instances")
    _common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--k-max", type=int, default=4)

    p = sub.add_parser("bias", help="normalized value bias of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-states", type=int, default=128)
    p.add_argument("--mc-episodes", type=int, default=5)

    p = sub.add_parser("diagnose", help="open-loop latent divergence of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizon", type=int, default=20)

    p = sub.add_parser("bench", help="time update rounds at the configured scale")
    _common(p)
    p.add_argument("--rounds", type=int, default=50)
    return parser


def _run_config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None and args.command in ("train", "bench"):
        overrides.append(f"run.out={args.out}")
    return load_config(args.config, overrides)


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = train(cfg, progress=args.verbose)
    final = res.rows[-1] if res.rows else {}
    print(json.dumps({"metrics": str(res.metrics_path), "checkpoint": str(res.checkpoint_path),
                      "final_eval_return": final.get("eval_return_mean")}))
    return 0


def _load(args):
    agent, meta = Agent.load(args.checkpoint)
    seed = args.seed if args.seed is not None else meta.get("extra", {}).get("seed", 0)
    return agent, meta, seed


def cmd_eval(args) -> int:
    agent, meta, seed = _load(args)
    env = env_for_checkpoint(meta, seed)
    mean, std = evaluate(agent, env, args.episodes, seed)
    _emit({"eval_return_mean": mean, "eval_return_std": std, "episodes": args.episodes,
           "step": meta["step"]}, args.out)
    return 0


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    stream = open(args.out, "w") if args.out else sys.stdout
    try:
        total, failures = run_verify(args.instances, args.k_max, seed, stream)
    finally:
        if args.out:
            stream.close()
    print(json.dumps({"checks": total, "failures": failures}), file=sys.stderr)
    return 0 if failures == 0 else 1


def cmd_bias(args) -> int:
    agent, meta, seed = _load(args)
    env = env_for_checkpoint(meta, seed)
    rep = bias_analysis(agent, env, args.n_states, args.mc_episodes, seed)
    _emit(rep.as_dict(), args.out)
    return 0


def cmd_diagnose(args) -> int:
    agent, meta, seed = _load(args)
    env = env_for_checkpoint(meta, seed)
    trace = latent_divergence(agent, env, args.horizon, seed)
    _emit({"divergence": trace.tolist()}, args.out)
    return 0


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    env = env_from_config(cfg, cfg.run.seed)
    agent = Agent(env.spec, cfg.agent, seed=cfg.run.seed)
    rng = np.random.default_rng(cfg.run.seed)
    buf = ReplayBuffer(cfg.agent.buffer_size, env.spec.obs_dim, env.spec.act_dim)
    obs = env.reset()
    fill = max(cfg.agent.batch * 4, 2 * env.spec.horizon)
    t0 = time.perf_counter()
    for _ in range(fill):
        a = rng.uniform(-1.0, 1.0, env.spec.act_dim)
        obs2, r, terminal, timeout = env.step(agent.to_env_action(a))
        buf.push(Transition(obs, a, r, obs2, terminal, timeout))
        obs = env.reset() if (terminal or timeout) else obs2
    env_rate = fill / (time.perf_counter() - t0)
    t0 = time.perf_counter()
    for i in range(args.rounds):
        agent.update_round(buf.sample_sequences(cfg.agent.batch, cfg.agent.K, rng), i)
    per_update = (time.perf_counter() - t0) / args.rounds
    _emit({"env_steps_per_sec": env_rate, "update_ms": 1000.0 * per_update,
           "train_steps_per_sec": 1.0 / (per_update * cfg.agent.utd), "rounds": args.rounds}, args.out)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "bias": cmd_bias,
            "diagnose": cmd_diagnose, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # unknown flags exit 2 with usage text
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error at {exc.key}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure, diagnostic checkpoint written: {exc}", file=sys.stderr)
        return 3
    except (ContractError, ALMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
