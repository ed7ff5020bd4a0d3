#!/usr/bin/env python3
"""Build the CSV + schema files under data/ from locally available sources.

Wine, Sonar and Ionosphere come from the KEEL copies shipped in the `keel_ds`
wheel (pip download keel-ds). KEEL drops Ionosphere's second attribute, which
is identically zero in the UCI original; it is restored here so the file has
the UCI shape (351 x 34).

Abalone is converted from the UCI `abalone.data` file when one is supplied
with --abalone. Rings are binned into three classes: 1-8, 9-10, 11+.
"""
import argparse
import csv
import json
import os
import zipfile


def keel_rows(wheel, name):
    with zipfile.ZipFile(wheel) as z:
        text = z.read(f"keel_ds/data/balanced/raw/{name}.dat").decode()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("@"):
            yield [c.strip() for c in line.split(",")]


def write(out, name, header, rows, label, categorical):
    with open(os.path.join(out, f"{name}.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    with open(os.path.join(out, f"{name}.schema.json"), "w") as f:
        json.dump({"label": label, "categorical": categorical}, f, indent=2)
        f.write("\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--keel-wheel", required=True)
    ap.add_argument("--abalone", help="path to UCI abalone.data")
    ap.add_argument("--out", default="data")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    wine = list(keel_rows(args.keel_wheel, "wine"))
    header = [f"a{i:02d}" for i in range(1, 14)] + ["class"]
    write(args.out, "wine", header, wine, "class", [])

    sonar = list(keel_rows(args.keel_wheel, "sonar"))
    header = [f"a{i:02d}" for i in range(1, 61)] + ["class"]
    write(args.out, "sonar", header, sonar, "class", [])

    iono = [[r[0], "0"] + r[1:] for r in keel_rows(args.keel_wheel, "ionosphere")]
    header = [f"a{i:02d}" for i in range(1, 35)] + ["class"]
    write(args.out, "ionosphere", header, iono, "class", ["a01", "a02"])

    if args.abalone:
        rows = []
        with open(args.abalone) as f:
            for line in f:
                parts = line.strip().split(",")
                if len(parts) != 9:
                    continue
                rings = int(parts[8])
                cls = "young" if rings <= 8 else ("adult" if rings <= 10 else "old")
                rows.append(parts[:8] + [cls])
        header = ["sex", "length", "diameter", "height", "whole_weight",
                  "shucked_weight", "viscera_weight", "shell_weight", "class"]
        write(args.out, "abalone", header, rows, "class", ["sex"])


if __name__ == "__main__":
    main()
