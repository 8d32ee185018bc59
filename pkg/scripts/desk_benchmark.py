"""Train the four reconstructors on the desk-scale dataset and report test PSNR.

    python3 scripts/desk_benchmark.py --data-seed 0 --train-seed 0 --cache runs/desk_data
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from xpra_unrolled.benchmark import MODELS, BenchmarkSettings, run_desk_benchmark


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--models", nargs="+", default=list(MODELS), choices=MODELS)
    p.add_argument("--cache", type=Path, help="dataset directory reused across runs")
    p.add_argument("--json", type=Path, help="write the results here")
    a = p.parse_args(argv)
    s = BenchmarkSettings(data_seed=a.data_seed, train_seed=a.train_seed, epochs=a.epochs, models=tuple(a.models))
    res = run_desk_benchmark(s, a.cache, log=lambda m: print(m, flush=True))
    print("\n".join(res.summary_lines()))
    if a.json:
        a.json.write_text(json.dumps({"init_only_psnr": res.init_only_psnr, "test_psnr": res.test_psnr,
                                      "losses": res.losses, "seconds": res.seconds,
                                      "settings": {k: str(v) for k, v in asdict(s).items()}}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
