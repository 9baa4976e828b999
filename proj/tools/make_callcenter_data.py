"""Writes data/callcenter_service.csv: synthetic lognormal service samples.

Stand-in for the empirical VRU and agent service histograms of a bank call
center. Means (seconds) and coefficients of variation per customer type are
chosen to be plausible for that kind of system, not fitted to real data.
"""

import csv
import pathlib

import numpy as np

VRU_MEAN = [60, 45, 70, 80, 55, 65]
AGENT_MEAN = [180, 120, 200, 260, 150, 220]
CV = 1.0
SAMPLES = 500


def lognormal(rng, mean, cv, n):
    sigma2 = np.log1p(cv * cv)
    mu = np.log(mean) - sigma2 / 2
    return rng.lognormal(mu, np.sqrt(sigma2), n)


def main():
    rng = np.random.default_rng(20240601)
    out = pathlib.Path(__file__).resolve().parent.parent / "data" / "callcenter_service.csv"
    with out.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "class", "seconds"])
        for stage, means in (("vru", VRU_MEAN), ("agent", AGENT_MEAN)):
            for c, m in enumerate(means):
                for x in lognormal(rng, m, CV, SAMPLES):
                    w.writerow([stage, c, f"{x:.3f}"])


if __name__ == "__main__":
    main()
