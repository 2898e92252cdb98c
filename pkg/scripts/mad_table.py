"""MAD of query and item embeddings per variant, from a matrix report.json.

    python scripts/mad_table.py runs/matrix/report.json
"""
import argparse
import json


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("report")
    args = ap.parse_args()
    with open(args.report) as fh:
        rep = json.load(fh)
    print(f"{'Model':<26}{'Query':>18}{'Item':>18}")
    for name in rep["order"]:
        row = rep["variants"][name]
        q, i = row["mad_query"], row["mad_item"]
        print(f"{row['label']:<26}{q['mean']:>10.4f} ±{q['std']:.4f}{i['mean']:>10.4f} ±{i['std']:.4f}")


if __name__ == "__main__":
    main()
