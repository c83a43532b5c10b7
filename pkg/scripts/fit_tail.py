"""Censored maximum-likelihood Weibull fit to a (time, status) CSV.

The bundled model's ``fit_death_disease`` tail parameters come from this
script run on its tab_surv.csv:

    python scripts/fit_tail.py src/cohortsim/data/shame/tab_surv.csv
"""

import argparse

import numpy as np
from scipy import optimize

from cohortsim.survival import km_estimate, read_survival_data


def weibull_negloglik(log_params, t, event):
    shape, scale = np.exp(log_params)
    z = (t / scale) ** shape
    # events contribute the log density, censored rows the log survival
    log_h = np.log(shape / scale) + (shape - 1) * np.log(t / scale)
    return -(np.sum(event * log_h) - np.sum(z))


def fit_weibull(t, event):
    t, event = np.asarray(t, float), np.asarray(event, float)
    start = np.log([1.0, t.mean()])
    res = optimize.minimize(weibull_negloglik, start, args=(t, event), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 10_000})
    if not res.success:
        raise RuntimeError(res.message)
    return tuple(np.exp(res.x))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("data", help="CSV with time and status columns")
    args = p.parse_args(argv)
    t, e = read_survival_data(args.data)
    shape, scale = fit_weibull(t, e)
    print(f"shape = {shape:.6f}")
    print(f"scale = {scale:.6f}")
    km = km_estimate(t, e)
    grid = np.arange(1, int(t.max()) + 1)
    print("\n t   KM      Weibull")
    for g in grid:
        print(f"{g:2d}  {float(km.sf(g)):.4f}  {np.exp(-(g / scale) ** shape):.4f}")


if __name__ == "__main__":
    main()
