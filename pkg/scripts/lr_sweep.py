"""Learning-rate sweep for the desk schedule.

For each rate and seed, trains the full model and reports test mIoU with the
episode's own support and with a support from a different class. A model
that reads the support scores much lower in the second case; one that
segments every salient shape scores about the same.

    python scripts/lr_sweep.py --rates 5e-5,3e-4,5e-4,1e-3 --seeds 0,1,2
"""
import argparse

from catrans.config import ModelConfig
from catrans.episodes import DatasetSplit, Episode, generate_episode
from catrans.train import model_predictor, score_episodes, train


def swapped_support(episodes):
    out = []
    for i, ep in enumerate(episodes):
        other = next(o for o in episodes[i + 1:] + episodes[:i] if o.class_id != ep.class_id)
        out.append(Episode(other.support_images, other.support_masks, ep.query_image, ep.query_mask,
                           ep.class_id, ep.seed, "test", ep.fold))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--rates", default="5e-5,3e-4,5e-4,1e-3")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--episodes", type=int, default=200)
    args = ap.parse_args()
    base = ModelConfig.load(args.config)
    split = DatasetSplit(base.fold)
    episodes = [generate_episode(split, "test", 1, s, base) for s in range(args.episodes)]
    wrong = swapped_support(episodes)
    print("lr,seed,test_miou,wrong_support_miou")
    for lr in (float(x) for x in args.rates.split(",")):
        for seed in (int(x) for x in args.seeds.split(",")):
            _, model = train(base.replace(base_lr=lr, seed=seed))
            pred = model_predictor(model)
            print(f"{lr!r},{seed},{score_episodes(pred, episodes)[1]:.4f},{score_episodes(pred, wrong)[1]:.4f}",
                  flush=True)


if __name__ == "__main__":
    main()
