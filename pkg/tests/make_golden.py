"""Regenerate tests/data/golden_report.json from the brute-force oracles.

Run once by hand; the test suite only reads the frozen file.
"""

import json
from pathlib import Path

import oracles

HERE = Path(__file__).parent / "data"

if __name__ == "__main__":
    rows = [json.loads(line) for line in (HERE / "golden_pairs.jsonl").read_text().splitlines() if line]
    values = oracles.report([(r["cand"], r["ref"]) for r in rows])
    out = {r["id"]: v for r, v in zip(rows, values)}
    (HERE / "golden_report.json").write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
