"""Average recall of the matching + registration pipeline versus the rotation
gap between query and reference views, on procedurally generated pairs.

    python3 scripts/viewpoint_sweep.py --pairs 8 --gaps 0 15 45 90 135 --out sweep.jsonl
"""

import argparse
import logging
import time
from dataclasses import replace

from refpose.config import load_config
from refpose.io import write_jsonl
from refpose.pipeline import gap_config, run_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--gaps", type=float, nargs="+", default=[0, 15, 45, 90, 135])
    ap.add_argument("--axis", choices="xyz", default="y")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise-std", type=float, default=0.0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    base = load_config(args.config)
    base.synth = replace(base.synth, n_pairs=args.pairs, seed=args.seed, noise_std=args.noise_std)
    rows = []
    print(f"{'gap':>6} {'AR':>7} {'VSD':>7} {'MSSD':>7} {'MSPD':>7} {'ADD.1d':>7} {'solved':>7} {'sec':>6}")
    for gap in args.gaps:
        t0 = time.time()
        results, _, table = run_synthetic(gap_config(base, gap, "xyz".index(args.axis)), args.jobs)
        solved = sum(r.pose is not None for r in results)
        print(f"{gap:6.1f} {table.ar:7.2f} {table.vsd:7.2f} {table.mssd:7.2f} {table.mspd:7.2f} "
              f"{table.add_01d:7.2f} {solved:4d}/{len(results):<2d} {time.time() - t0:6.1f}")
        rows.append({"pair_id": f"gap-{gap:07.2f}", "gap_deg": gap, "axis": args.axis, "solved": solved,
                     **table.to_dict()})
    if args.out:
        write_jsonl(args.out, rows)


if __name__ == "__main__":
    main()
