"""Generate, score, train, evaluate and report in one go.

    python3 scripts/run_pipeline.py --out runs/dc --mode dc
    python3 scripts/run_pipeline.py --out runs/ac --mode ac --jobs 4

Every step goes through the ``topocem`` CLI, so the outputs match a manual run.
"""
import argparse
import sys
import time
from pathlib import Path

from topocem.cli import main as topocem


def step(name, argv):
    t0 = time.perf_counter()
    print(f"[{name}] topocem {' '.join(argv)}", flush=True)
    code = topocem(argv)
    if code:
        sys.exit(f"{name} failed with exit code {code}")
    print(f"[{name}] {time.perf_counter() - t0:.1f}s", flush=True)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/pipeline")
    p.add_argument("--mode", choices=("ac", "dc"), default="dc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stress", type=float, default=1.2)
    p.add_argument("--train-count", type=int, default=50)
    p.add_argument("--test-count", type=int, default=20)
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()

    out = Path(args.out)
    common = ["--mode", args.mode, "--jobs", str(args.jobs)]
    pool, held = out / "scenarios", out / "held_out"
    step("generate", ["gen-scenarios", "--count", str(args.train_count), "--stress",
                      str(args.stress), "--seed", str(args.seed), "--out", str(pool)])
    step("generate held-out", ["gen-scenarios", "--count", str(args.test_count), "--stress",
                               str(args.stress), "--seed", str(args.seed + 1), "--prefix",
                               "held", "--out", str(held)])
    step("score", ["score", "--scenarios", str(pool), "--output", str(out / "scores.csv"),
                   "--seed", str(args.seed), *common])

    # select prints the id on stdout; recompute it here instead of capturing
    from topocem.scenario import read_scores_csv, select_training_scenario
    sid = select_training_scenario(read_scores_csv(out / "scores.csv"))
    print(f"[select] {sid}")

    step("train", ["train", "--scenario", str(pool / f"{sid}.csv"), "--out",
                   str(out / "train"), "--seed", str(args.seed), *common])
    step("evaluate agent", ["evaluate", "--checkpoint", str(out / "train" / "policy.bin"),
                            "--scenarios", str(held), "--episodes", str(args.episodes),
                            "--seed", str(args.seed + 1), "--out", str(out / "eval_agent"),
                            *common])
    step("evaluate do-nothing", ["evaluate", "--scenarios", str(held), "--seed",
                                 str(args.seed + 1), "--out", str(out / "eval_do_nothing"),
                                 *common])
    step("analyze", ["analyze", "--scores", str(out / "scores.csv"), "--history",
                     str(out / "train" / "history.csv"), "--evaluation",
                     str(out / "eval_agent" / "evaluation.csv"), "--out",
                     str(out / "reports"), "--seed", str(args.seed), *common])
    for name in ("eval_agent", "eval_do_nothing"):
        rows = (out / name / "summary.csv").read_text().splitlines()
        print(f"{name}: {rows[-1]}")


if __name__ == "__main__":
    main()
