#!/usr/bin/env python3
"""Run the seeded synthetic forgetting benchmark and print a summary table.

Deliberately repeats the configuration frozen into tests/test_acceptance.py
instead of importing it: the gate must not move when this script is edited.
Expect a few minutes of wall time at the default scale.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from streamdet import (
    BufferSettings,
    ClassSchedule,
    ExperimentConfig,
    HeadSettings,
    Learner,
    PqSettings,
    Seeds,
    SyntheticSpec,
    generate_dataset,
    omega_map,
    run_experiment,
)

POLICIES = ("min", "max", "bal", "random", "no_replace")


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("bench_out"), help="run directory root")
    ap.add_argument("--seed", type=int, default=17, help="dataset seed")
    ap.add_argument(
        "--policies",
        default="min,max,no_replace",
        help=f"comma list of replay policies to run, from {POLICIES}",
    )
    ap.add_argument(
        "--quick",
        action="store_true",
        help="40 images/class instead of 200, for a fast smoke run",
    )
    return ap.parse_args(argv)


def base_retention(result, base_classes):
    first = np.mean([result.reports[0].per_class_ap[c] for c in base_classes])
    last = np.mean([result.reports[-1].per_class_ap.get(c, 0.0) for c in base_classes])
    return float(last / first)


def main(argv=None) -> int:
    args = parse_args(argv)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    for p in policies:
        if p not in POLICIES:
            raise SystemExit(f"unknown policy {p!r}; choose from {POLICIES}")

    spec = SyntheticSpec(
        num_classes=10,
        images_per_class=40 if args.quick else 200,
        grid=(5, 5),
        channels=64,
        proposals_per_image=40,
        jitters_per_gt=8,
        seed=args.seed,
    )
    print(f"generating dataset: {spec.num_classes} classes x {spec.images_per_class} images")
    dataset = generate_dataset(spec)

    base = (1, 2, 3, 4, 5)
    sched = ClassSchedule(base_classes=base, incremental_classes=(6, 7, 8, 9, 10), eval_every=1)
    pq = PqSettings(num_codebooks=8, codebook_size=256, train_locations=30)
    head = HeadSettings(hidden=128, learning_rate=0.005)

    def run(name, schedule, learner, buffer=None):
        cfg = ExperimentConfig(
            schedule=schedule,
            learner=learner,
            replay_n=4,
            buffer=buffer,
            pq=pq,
            head=head,
            seeds=Seeds(),
            base_epochs=8,
        )
        t0 = time.time()
        result = run_experiment(cfg, dataset, out_dir=args.out / name)
        print(f"  {name}: {time.time() - t0:.0f} s, alphas {[round(a, 4) for a in result.alphas]}")
        return result

    print("running offline reference (all classes at once)")
    offline = run(
        "offline",
        ClassSchedule(base_classes=tuple(range(1, 11)), incremental_classes=(), eval_every=1),
        Learner.FINE_TUNE,
    )
    denom = offline.alphas[0]

    print("running streamed learners")
    runs = {"finetune": run("finetune", sched, Learner.FINE_TUNE)}
    for policy in policies:
        buf = BufferSettings(policy=policy) if policy == "no_replace" else BufferSettings(
            policy=policy, capacity_entries=100
        )
        runs[f"replay-{policy}"] = run(f"replay-{policy}", sched, Learner.REPLAY, buf)

    rows = []
    for name, result in runs.items():
        rows.append(
            {
                "run": name,
                "omega": round(omega_map(result.alphas, denom), 4),
                "final_map": round(result.alphas[-1], 4),
                "base_retention": round(base_retention(result, base), 4),
            }
        )
    rows.sort(key=lambda r: -r["omega"])

    print(f"\noffline reference mAP: {denom:.4f}")
    print(f"{'run':<20} {'omega':>8} {'final mAP':>10} {'base kept':>10}")
    for r in rows:
        print(f"{r['run']:<20} {r['omega']:>8.4f} {r['final_map']:>10.4f} {r['base_retention']:>10.1%}")

    summary = {"offline_map": denom, "spec_seed": args.seed, "quick": args.quick, "runs": rows}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"\nwrote {args.out / 'summary.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
