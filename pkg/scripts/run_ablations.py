"""Train and score the branch and level ablation grids under the desk config.

Runs are cached by config hash under <out>/runs, so an interrupted grid
resumes where it stopped and settings shared by two axes train once.

    python scripts/run_ablations.py --config configs/desk.cfg --out runs/desk
"""
import argparse
import logging
from pathlib import Path

from catrans.config import ModelConfig
from catrans.train import ablate, ablation_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--axes", default="branch,level")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    cfg = ModelConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for axis in args.axes.split(","):
        rows = ablate(cfg, axis, out, progress=lambda msg: print(msg, flush=True))
        text = ablation_csv(rows)
        (out / f"ablation_{axis}.csv").write_text(text)
        print(text, flush=True)


if __name__ == "__main__":
    main()
