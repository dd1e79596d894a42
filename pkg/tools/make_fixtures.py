"""Regenerate the shipped reconstruction fixtures under fixtures/.

golden_w_plus: noise-free linear-response tables for |W+>.
paper_like:    sampled counts for a mixed W state seen through a 0.893 mode overlap.
"""

import sys
from pathlib import Path

from pathtomo.cli import dumps
from pathtomo.counting import count
from pathtomo.pipeline import Protocol, ideal_tables, simulate

ROOT = Path(__file__).resolve().parent.parent


def write_fixture(name: str, proto: Protocol, tables: dict):
    out = ROOT / "fixtures" / name
    (out / "counts").mkdir(parents=True, exist_ok=True)
    runs = {}
    for run, table in tables.items():
        (out / "counts" / f"{run}.json").write_text(dumps(table.to_json()))
        runs[run] = {"events": None, "config_digest": table.header["config_digest"]}
    (out / "manifest.json").write_text(dumps({"format": "pathtomo-manifest/1", "protocol": proto.doc, "runs": runs}))
    print(f"wrote {out}")


def main():
    golden = Protocol.load(ROOT / "configs" / "golden_w_plus.json")
    write_fixture("golden_w_plus", golden, ideal_tables(golden))
    paper = Protocol.load(ROOT / "configs" / "paper_like.json")
    write_fixture("paper_like", paper, {k: count(v) for k, v in simulate(paper).items()})


if __name__ == "__main__":
    sys.exit(main())
