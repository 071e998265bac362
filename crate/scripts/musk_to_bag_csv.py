#!/usr/bin/env python3
"""Convert a headerless Musk table (label, bag id, features...) to bag CSV.

Usage: musk_to_bag_csv.py INPUT OUTPUT

Accepts the layout shipped by the `mil` Python package
(mil/data/datasets/csv/musk1.csv). Bag ids are kept as they are; a bag
whose rows disagree on the label is an error.
"""
import csv
import sys


def main(src, dst):
    rows = []
    with open(src, newline="") as f:
        for rec in csv.reader(f):
            if not rec:
                continue
            label = int(float(rec[0]))
            bag = rec[1].strip()
            feats = rec[2:]
            rows.append((bag, label, feats))
    dim = len(rows[0][2])
    labels = {}
    for bag, label, feats in rows:
        if len(feats) != dim:
            raise SystemExit(f"bag {bag}: ragged row")
        if labels.setdefault(bag, label) != label:
            raise SystemExit(f"bag {bag}: conflicting labels")
    with open(dst, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bag_id", "label", "instance_label"] + [f"f{k}" for k in range(dim)])
        for bag, label, feats in rows:
            w.writerow([bag, 1 if label > 0 else 0, ""] + [str(float(v)).removesuffix(".0") for v in feats])
    n_bags = len(labels)
    n_pos = sum(1 for v in labels.values() if v > 0)
    print(f"{len(rows)} instances, {n_bags} bags ({n_pos} positive), {dim} features", file=sys.stderr)


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    main(sys.argv[1], sys.argv[2])
