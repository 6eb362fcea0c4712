#!/usr/bin/env python3
"""End-to-end workflow through the CLI: search, train, quantize, validate.

Equivalent shell session:

    mixprec search   --kb table2.json --n 12 --t-luts 80 --t-dram 100 \
                     --t-bram 100 --t-dsps 100 --top 2 --json
    mixprec pipeline --kb table2.json --data synthetic.csv --n 12 \
                     --d-model 16 --t-luts 80 --t-dram 100 --t-bram 100 \
                     --t-dsps 100 --top 2 --epochs 20 --seed 42
"""

import json
import tempfile
from pathlib import Path

from mixprec.cli import run
from mixprec.data import bundled_synthetic_csv
from mixprec.knowledge import bundled_database, save

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    kb = tmp / "table2.json"
    save(bundled_database(), kb)
    data = tmp / "synthetic.csv"
    data.write_text(bundled_synthetic_csv())
    run_dir = tmp / "run"

    code = run(
        [
            "pipeline",
            "--kb", str(kb),
            "--data", str(data),
            "--n", "12",
            "--d-model", "16",
            "--t-luts", "80", "--t-dram", "100", "--t-bram", "100", "--t-dsps", "100",
            "--top", "2",
            "--epochs", "20", "--patience", "20", "--lr", "0.002",
            "--seed", "42",
            "--out-dir", str(run_dir),
        ]
    )
    assert code == 0, f"pipeline exited {code}"

    report = json.loads((run_dir / "report.json").read_text())
    print(f"\nfloat baseline RMSE: {report['float_rmse']:.4f}")
    print("candidates (best first):")
    for cand in report["candidates"]:
        print(
            f"  {','.join(map(str, cand['combo']))}  score {cand['score']}  "
            f"est LUTs {cand['estimate']['luts']}  RMSE {cand['rmse']:.4f}"
        )
    manifest = json.loads((run_dir / "manifest.json").read_text())
    print("run artifacts:", ", ".join(manifest["outputs"]))
