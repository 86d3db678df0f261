#!/usr/bin/env python3
"""Export the scikit-learn 8x8 handwritten digits as label,p0..p63 CSV."""
import argparse

from sklearn.datasets import load_digits


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("out", help="destination CSV path")
    args = parser.parse_args()
    digits = load_digits()
    with open(args.out, "w") as fh:
        fh.write("# label,p0..p63 (8x8 digits, intensity 0..16)\n")
        for label, row in zip(digits.target, digits.data):
            fh.write(",".join([str(int(label))] + [str(int(v)) for v in row]) + "\n")


if __name__ == "__main__":
    main()
