"""AdamW, the step schedule, the training loop, evaluation and the ablation grid."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import ModelConfig
from .episodes import DatasetSplit, Episode, generate_episode, miou, poison_query_masks
from .model import CATrans, episode_loss
from .seeding import episode_seeds, substream
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    pass


def lr_at(step: int, cfg: ModelConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.base_lr * (cfg.lr_decay if step >= cfg.decay_step else 1.0)


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimState,
               lr: float | None = None) -> None:
    """Decoupled weight decay, then the bias-corrected Adam update; in place."""
    lr = state.lr if lr is None else lr
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} parameters but optimizer holds {len(state.m)} moments")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"gradient {g.shape} does not match parameter {p.data.shape}")
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


@dataclass
class RunManifest:
    config: ModelConfig
    seed: int
    variant: str
    losses: list[tuple[int, float, float]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    best_val: float = -1.0
    best_step: int = -1

    def metrics_csv(self) -> str:
        val = dict(self.evals)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "val_mIoU"])
        for step, loss, lr in self.losses:
            w.writerow([step, repr(loss), repr(lr), repr(val[step]) if step in val else ""])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"config_hash={self.config.config_hash()}", f"seed={self.seed}", f"variant={self.variant}",
                 f"steps={len(self.losses)}", f"best_val_mIoU={self.best_val!r}", f"best_step={self.best_step}",
                 f"wall_clock_s={self.wall_clock:.3f}"]
        lines += [f"note={n}" for n in self.notes]
        lines.append("[config]")
        return "\n".join(lines) + "\n" + self.config.to_text()


def interpretation_notes(cfg: ModelConfig) -> list[str]:
    notes = ["encoder norm: per-sample channel normalisation with affine (frozen-BN stand-in)",
             "rct self-context support: no residual (value width != query width)",
             "rct cross-context: no residual (value width != query width)",
             "rat fusion: query self-affinity added before LN, no outer residual",
             f"projection init: {cfg.init}",
             f"norm variance floors: support self-context {cfg.ln_eps_mask!r}, affinity fusion {cfg.ln_eps_affinity!r}"]
    if cfg.variant in ("rct_only", "rat_only"):
        notes.append(f"variant {cfg.variant}: other branch zeroed, widths preserved")
    if cfg.variant == "rct_nosupport":
        notes.append("variant rct_nosupport: support self-context replaced by a linear projection of mask features")
    return notes


def train(cfg: ModelConfig, out_dir=None, episode_fn: Callable[[int], Episode] | None = None,
          model: CATrans | None = None) -> tuple[RunManifest, CATrans]:
    """Train one model; ``episode_fn(step)`` overrides episode sampling (used for overfit checks)."""
    cfg.validate()
    t0 = time.perf_counter()
    split = DatasetSplit(cfg.fold)
    model = model or CATrans(cfg, substream(cfg.seed, "init"))
    params = model.parameters()
    state = OptimState.for_params(params, lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                                  weight_decay=cfg.weight_decay)
    data_rng = substream(cfg.seed, "data")
    flip_rng = substream(cfg.seed, "flip")
    val_seeds = list(range(cfg.val_episodes))
    manifest = RunManifest(cfg, cfg.seed, cfg.variant, notes=interpretation_notes(cfg))
    best_state = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())

    for step in range(cfg.steps):
        ep_seed = int(data_rng.integers(0, 2 ** 31 - 1))
        if episode_fn is not None:
            ep = episode_fn(step)
        else:
            ep = generate_episode(split, "train", cfg.shots, ep_seed, cfg)
            if cfg.flip:
                ep = ep.flipped(flip_rng)
        lr = lr_at(step, cfg)
        try:
            loss, _ = episode_loss(model, ep)
        except NonFiniteError as exc:
            _dump_failure(out, step, manifest, str(exc))
            raise NumericFailure(f"non-finite values at step {step}: {exc}") from exc
        value = float(loss.data)
        if not np.isfinite(value):
            _dump_failure(out, step, manifest, "non-finite loss")
            raise NumericFailure(f"non-finite loss at step {step}")
        model.zero_grad()
        loss.backward()
        adamw_step(params, [p.grad for p in params], state, lr)
        manifest.losses.append((step, value, lr))
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            score = validate(model, split, cfg, val_seeds)
            manifest.evals.append((step, score))
            log.info("step %d loss %.4f val mIoU %.4f", step, value, score)
            if score > manifest.best_val:
                manifest.best_val, manifest.best_step = score, step
                best_state = {k: v.copy() for k, v in model.state_dict().items()}

    manifest.wall_clock = time.perf_counter() - t0
    if out is not None:
        write_run(out, manifest, model, best_state)
    return manifest, model


def validate(model: CATrans, split: DatasetSplit, cfg: ModelConfig, seeds: Sequence[int]) -> float:
    eps = [generate_episode(split, "val", cfg.shots, s, cfg) for s in seeds]
    return score_episodes(model_predictor(model), eps)[1]


def write_run(out: Path, manifest: RunManifest, model: CATrans, best_state=None) -> None:
    cfg = manifest.config
    (out / "metrics.csv").write_text(manifest.metrics_csv())
    (out / "manifest.txt").write_text(manifest.to_text())
    ckpt.save(out / "model.ckpt", model.state_dict(), cfg.config_hash(), cfg.precision)
    if best_state is not None:
        ckpt.save(out / "best.ckpt", best_state, cfg.config_hash(), cfg.precision)


def _dump_failure(out: Path | None, step: int, manifest: RunManifest, reason: str) -> None:
    if out is None:
        return
    lines = [f"step={step}", f"reason={reason}"]
    lines += [f"loss[{s}]={l!r}" for s, l, _ in manifest.losses[-20:]]
    (out / "failure.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- evaluation

def model_predictor(model: CATrans) -> Callable[[Episode], np.ndarray]:
    def predict(ep: Episode) -> np.ndarray:
        with no_grad():
            return model.predict(ep).hard_mask
    return predict


def score_episodes(predictor: Callable[[Episode], np.ndarray], episodes: Sequence[Episode]):
    """Predict with query masks poisoned, then score against them."""
    preds = []
    with poison_query_masks():
        for ep in episodes:
            preds.append(predictor(ep))
    return miou(preds, [ep.query_mask for ep in episodes], [ep.class_id for ep in episodes])


@dataclass
class EvalResult:
    fold: int
    k: int
    runs: list[tuple[int, float]]

    @property
    def mean(self) -> float:
        return float(np.mean([m for _, m in self.runs]))

    @property
    def spread(self) -> float:
        return float(np.std([m for _, m in self.runs]))


def evaluate(predictor: Callable[[Episode], np.ndarray], cfg: ModelConfig, fold: int, k: int,
             n_episodes: int, seeds: Sequence[int]) -> EvalResult:
    """Test-fold mIoU for each run seed; classes come from the fold's test set only."""
    split = DatasetSplit(fold)
    runs = []
    for s in seeds:
        eps = [generate_episode(split, "test", k, es, cfg) for es in episode_seeds(s, n_episodes)]
        runs.append((int(s), score_episodes(predictor, eps)[1]))
    return EvalResult(fold, k, runs)


def evaluate_checkpoint(path, cfg: ModelConfig, fold: int, k: int, n_episodes: int, seeds: Sequence[int],
                        force: bool = False) -> EvalResult:
    header, state = ckpt.load(path, cfg.config_hash(), force)
    if header.get("kind") == "oracle":
        predictor = oracle_predictor
    else:
        model = CATrans(cfg)
        model.load_state_dict(state)
        predictor = model_predictor(model)
    return evaluate(predictor, cfg, fold, k, n_episodes, seeds)


def oracle_predictor(ep: Episode) -> np.ndarray:
    """Reference predictor that returns the ground truth; a test fixture, never a model."""
    return ep._query_mask.copy()


# ---------------------------------------------------------------- ablation

AXES = {
    "branch": [("baseline", {"variant": "baseline"}), ("rat_only", {"variant": "rat_only"}),
               ("rct_only", {"variant": "rct_only"}), ("rct_nosupport", {"variant": "rct_nosupport"}),
               ("full", {"variant": "full"})],
    "level": [("3", {"variant": "full", "levels": (3,)}), ("4", {"variant": "full", "levels": (4,)}),
              ("3,4", {"variant": "full", "levels": (3, 4)})],
    "heads": [("1", {"variant": "full", "heads": 1}), ("2", {"variant": "full", "heads": 2})],
}


@dataclass
class AblationRow:
    axis: str
    setting: str
    seeds: list[int]
    mious: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.mious))

    @property
    def std(self) -> float:
        return float(np.std(self.mious))


def ablate(cfg: ModelConfig, axis: str, out_dir=None, progress: Callable[[str], None] | None = None) -> list[AblationRow]:
    """Train and test every setting of one axis under the shared ablation seeds.

    Each trained run is stored under ``out_dir/runs/<config hash>``, so a
    setting shared by two axes is trained once and reruns are free.
    """
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {sorted(AXES)}")
    rows = []
    for setting, overrides in AXES[axis]:
        mious = []
        for seed in cfg.ablation_seeds:
            run_cfg = cfg.replace(seed=seed, **overrides)
            score = run_and_score(run_cfg, Path(out_dir) / "runs" if out_dir else None)
            if progress:
                progress(f"{axis} {setting} seed {seed}: mIoU {score:.4f}")
            mious.append(score)
        rows.append(AblationRow(axis, setting, list(cfg.ablation_seeds), mious))
    return rows


def run_and_score(cfg: ModelConfig, runs_root=None) -> float:
    """Train one config and return its mean test-fold mIoU, cached under ``runs_root/<config hash>``."""
    run_dir = Path(runs_root) / cfg.config_hash() if runs_root is not None else None
    score = _cached_score(run_dir, cfg)
    if score is None:
        _, model = train(cfg, run_dir)
        res = evaluate(model_predictor(model), cfg, cfg.fold, cfg.shots, cfg.test_episodes, cfg.eval_seeds)
        score = res.mean
        if run_dir is not None:
            lines = [f"config_hash={cfg.config_hash()}", f"miou={score!r}"]
            lines += [f"run{s}={m!r}" for s, m in res.runs]
            (run_dir / "test_miou.txt").write_text("\n".join(lines) + "\n")
    return score


def _cached_score(run_dir: Path | None, cfg: ModelConfig) -> float | None:
    if run_dir is None or not (run_dir / "test_miou.txt").exists():
        return None
    kv = dict(line.split("=", 1) for line in (run_dir / "test_miou.txt").read_text().splitlines() if "=" in line)
    if kv.get("config_hash") != cfg.config_hash():
        return None
    return float(kv["miou"])


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "setting", "mean_mIoU", "std_mIoU", "seeds", "per_seed_mIoU"])
    for r in rows:
        w.writerow([r.axis, r.setting, repr(r.mean), repr(r.std), ";".join(map(str, r.seeds)),
                    ";".join(repr(m) for m in r.mious)])
    return buf.getvalue()
