"""Probabilistic sensitivity analysis on the bundled model.

Prints mean-based totals with their frontier, the acceptability curve at a
few thresholds and the EVPI, and shows that the worker count does not change
the exported draws.
"""

import argparse
import time
from importlib.resources import files

from cohortsim import load_model
from cohortsim.uncertainty import ceac, evpi, export_psa, psa_summary, run_psa


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--draws", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)

    m = load_model(files("cohortsim") / "data" / "shame" / "model.toml")
    t0 = time.perf_counter()
    res = run_psa(m.spec, m.psa, args.draws, args.seed, args.threads)
    print(f"{res.n} draws in {time.perf_counter() - t0:.1f} s\n")

    summ = psa_summary(res)
    print(summ.means.round(1).to_string(), "\n")
    print("frontier:", " -> ".join(summ.frontier.frontier))
    for s in summ.frontier.steps:
        print(f"  {s.strategy} vs {s.reference}: ICER {s.icer:.0f}")

    lams = [0, 1000, 5000, 10000, 15000, 25000, 50000]
    print("\nacceptability:")
    print(ceac(res, lams).pivot(index="lambda", columns="strategy", values="probability").to_string())
    print("\nEVPI:")
    print(evpi(res, lams).to_string(index=False))

    if args.threads == 1:
        other = run_psa(m.spec, m.psa, min(args.draws, 40), args.seed, workers=2)
        same = export_psa(other) == export_psa(run_psa(m.spec, m.psa, min(args.draws, 40), args.seed))
        print(f"\nexport identical with 2 workers: {same}")


if __name__ == "__main__":
    main()
