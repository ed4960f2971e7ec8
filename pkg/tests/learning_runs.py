"""Cached desk-scale Pendulum runs shared by the learning acceptance checks.

Each run lives in ``runs/acceptance/<variant>_s<seed>_<key>/`` where the key
hashes the full run config and the source of every module that affects
training, so a code change forces a rerun. Populate the cache ahead of a
pytest session with::

    python3 tests/learning_runs.py [variant ...]
"""
from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from alm.harness.config import RunConfig, load_config
from alm.harness.train import train, tune_allocator

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / "runs" / "acceptance"
SRC = ROOT / "src" / "alm"
TRAINING_SOURCES = ["agent.py", "dists.py", "nets.py", "envs.py", "experience.py",
                    "diffmath/tensor.py", "diffmath/optim.py",
                    "harness/train.py", "harness/config.py"]

BASE = ["env.name=pendulum", "agent.profile=desk", "agent.K=3", "run.total_env_steps=30000",
        "run.warmup_steps=5000", "run.eval_every=2500", "run.eval_episodes=5"]
VARIANTS = {
    "alm": [],
    "modelfree": ["agent.modelfree_actor=true"],
    "no_kl": ["agent.no_kl=true"],
}
SEEDS = {"alm": range(5), "modelfree": range(5), "no_kl": range(3)}

log = logging.getLogger("learning_runs")


def code_hash() -> str:
    h = hashlib.sha256()
    for rel in TRAINING_SOURCES:
        h.update(rel.encode())
        h.update((SRC / rel).read_bytes())
    return h.hexdigest()


def run_config(variant: str, seed: int) -> tuple[RunConfig, str]:
    cfg = load_config(None, BASE + VARIANTS[variant] + [f"run.seed={seed}", "run.out="])
    key = hashlib.sha256((cfg.dumps() + code_hash()).encode()).hexdigest()[:12]
    cfg.run.out = str(CACHE / f"{variant}_s{seed}_{key}")
    return cfg, key


def ensure_run(variant: str, seed: int, train_missing: bool = True) -> Path | None:
    """Directory of a finished run, training it first if it is not cached."""
    cfg, key = run_config(variant, seed)
    out = Path(cfg.run.out)
    done = out / "done.json"
    if done.exists():
        return out
    if not train_missing:
        return None
    log.info("training %s seed %d into %s", variant, seed, out)
    t0 = time.perf_counter()
    train(cfg, progress=True)
    done.write_text(json.dumps({"key": key, "wall_clock_s": time.perf_counter() - t0}) + "\n")
    return out


def wall_clock(run_dir: Path) -> float:
    return float(json.loads((run_dir / "done.json").read_text())["wall_clock_s"])


def main(variants: list[str]) -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    tune_allocator()
    for variant in variants or list(VARIANTS):
        for seed in SEEDS[variant]:
            ensure_run(variant, seed)


if __name__ == "__main__":
    main(sys.argv[1:])
