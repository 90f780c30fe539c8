"""Repeat the FitzHugh-Nagumo comparison over seeded datasets and tabulate the distances."""

import argparse
import json

from odelaplace import io
from odelaplace.config import config_hash, load_config
from odelaplace.experiments import repeat_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="fn-s3.1")
    ap.add_argument("--count", type=int, default=30)
    ap.add_argument("--out", default="results/repeat")
    args = ap.parse_args()

    config = load_config(args.config)
    h = config_hash(config)
    rows, summary = repeat_experiment(config, args.count, out_dir=args.out)
    io.write_table_csv(
        f"{args.out}/repeat_distances.csv",
        ["seed", "correlation_frobenius", "covariance_frobenius", "variance_ok", "correlation_ok"],
        rows,
        h,
    )
    io.write_table_csv(f"{args.out}/repeat_histogram.csv", ["bin_low", "bin_high", "count"],
                       summary.pop("histogram"), h)
    io.write_json(f"{args.out}/repeat_summary.json", summary, h)
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
