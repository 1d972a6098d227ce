"""Chance-level calibration: test-fold mIoU of untrained models and trivial predictors.

    python scripts/calibrate_chance.py --config configs/desk.cfg --seeds 0,1,2
"""
import argparse

import numpy as np

from catrans.config import ModelConfig
from catrans.model import CATrans
from catrans.train import evaluate, model_predictor


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--episodes", type=int, default=500)
    args = ap.parse_args()
    cfg = ModelConfig.load(args.config)
    s = cfg.image_size

    def run(name, predictor):
        res = evaluate(predictor, cfg, cfg.fold, 1, args.episodes, cfg.eval_seeds)
        print(f"{name:<24} mIoU {res.mean:.4f} +- {res.spread:.4f}")

    for seed in (int(x) for x in args.seeds.split(",")):
        run(f"untrained seed {seed}", model_predictor(CATrans(cfg.replace(seed=seed))))
    run("all foreground", lambda ep: np.ones((s, s), np.float32))
    run("all background", lambda ep: np.zeros((s, s), np.float32))
    # segment every non-background pixel: what a model ignoring the support can reach
    run("support mask copied", lambda ep: ep.support_masks[0].astype(np.float32))


if __name__ == "__main__":
    main()
