"""Print near-linearity residuals of the two-layer and deep nets across widths."""

import argparse

from advlab.training import near_linearity_sweep


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--widths", type=int, nargs="+", default=[256, 1024, 4096])
    parser.add_argument("--d", type=int, default=10)
    parser.add_argument("--H", type=int, default=2)
    parser.add_argument("--trials", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    res = near_linearity_sweep(args.widths, d=args.d, H=args.H, trials=args.trials, seed=args.seed)
    print("m,two_layer_scaled_max,deep_median")
    for m in args.widths:
        print(f"{m},{res['two_layer_scaled_max'][m]!r},{res['deep_median'][m]!r}")


if __name__ == "__main__":
    main()
