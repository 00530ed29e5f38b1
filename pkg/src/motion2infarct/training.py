"""Composite segmentation loss, Adam with step decay, and the training loop."""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .features import assemble_features
from .mesh import MeshSequence, extract_hybrid_input
from .metrics import dice
from .network import backward, build_graph, forward, init_parameters, predict
from .network.checkpoint import load_checkpoint, save_checkpoint
from .network.model import ModelState, NetworkConfig

log = logging.getLogger(__name__)

POS_WEIGHT_RANGE = (1.0, 100.0)


@dataclass(frozen=True)
class LossConfig:
    lambda_tversky: float = 1.0
    alpha: float = 0.3
    beta: float = 0.7
    bce_pos_weight_mode: str = "auto"
    fixed_pos_weight: float = 1.0
    smooth_eps: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lambda_tversky < 0:
            raise ValueError("alpha, beta and lambda_tversky must be >= 0")
        if not self.smooth_eps > 0:
            raise ValueError("smooth_eps must be > 0")
        if self.bce_pos_weight_mode not in ("auto", "fixed"):
            raise ValueError("bce_pos_weight_mode must be 'auto' or 'fixed'")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.7
    lr_decay_every: int = 800
    epochs: int = 600
    batch_size: int = 1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    threshold: float = 0.5

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("batch_size and lr_decay_every must be >= 1")


# -- losses -----------------------------------------------------------------

def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def auto_pos_weight(labels) -> float:
    """Negative/positive ratio of one case, clamped to [1, 100]."""
    y = np.asarray(labels)
    pos = int(np.count_nonzero(y))
    if pos == 0:
        warnings.warn("no positive labels; BCE positive weight clamped to 100", RuntimeWarning)
        return POS_WEIGHT_RANGE[1]
    return float(np.clip((y.size - pos) / pos, *POS_WEIGHT_RANGE))


def weighted_bce(probs, labels, pos_weight):
    """Mean of ``-[w y log p + (1 - y) log(1 - p)]`` and its gradient w.r.t. ``p``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = -np.mean(pos_weight * y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (-pos_weight * y / p + (1.0 - y) / (1.0 - p)) / p.size
    return float(loss), grad


def weighted_bce_logits(logits, labels, pos_weight):
    """Same loss as :func:`weighted_bce` evaluated from logits; gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = -np.mean(pos_weight * y * _log_sigmoid(z) + (1.0 - y) * _log_sigmoid(-z))
    p = expit(z)
    grad = (-pos_weight * y * (1.0 - p) + (1.0 - y) * p) / z.size
    return float(loss), grad


def tversky_loss(probs, labels, alpha=0.3, beta=0.7, eps=1e-6):
    """``1 - (TP + eps) / (TP + alpha FP + beta FN + eps)`` on soft counts, with gradient w.r.t. ``p``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    tp = np.sum(p * y)
    fp = np.sum(p * (1.0 - y))
    fn = np.sum((1.0 - p) * y)
    num = tp + eps
    den = tp + alpha * fp + beta * fn + eps
    dden = y + alpha * (1.0 - y) - beta * y
    grad = -(y * den - num * dden) / (den * den)
    return float(1.0 - num / den), grad


def total_loss(logits, labels, cfg: LossConfig = LossConfig()):
    """Weighted BCE plus ``lambda`` times Tversky loss, differentiated w.r.t. logits.

    Returns ``(loss, grad_logits, parts)``.
    """
    y = np.asarray(labels, dtype=np.float64)
    z = np.asarray(logits, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ in shape")
    w = auto_pos_weight(y) if cfg.bce_pos_weight_mode == "auto" else cfg.fixed_pos_weight
    bce, g_bce = weighted_bce_logits(z, y, w)
    if cfg.lambda_tversky == 0:
        return bce, g_bce, {"bce": bce, "tversky": 0.0, "pos_weight": w}
    p = expit(z)
    tv, g_tv = tversky_loss(p, y, cfg.alpha, cfg.beta, cfg.smooth_eps)
    grad = g_bce + cfg.lambda_tversky * g_tv * p * (1.0 - p)
    return bce + cfg.lambda_tversky * tv, grad, {"bce": bce, "tversky": tv, "pos_weight": w}


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamMoments:
    m: dict
    v: dict
    t: int = 0


def init_moments(params) -> AdamMoments:
    params = getattr(params, "params", params)
    return AdamMoments({k: np.zeros_like(a) for k, a in params.items()},
                       {k: np.zeros_like(a) for k, a in params.items()}, 0)


def lr_at(t: int, cfg: TrainConfig) -> float:
    """Step schedule ``lr0 * factor ** floor(t / every)``."""
    return cfg.lr0 * cfg.lr_decay_factor ** (t // cfg.lr_decay_every)


def adam_update(params: dict, grads: dict, moments: AdamMoments, t: int, cfg: TrainConfig):
    """Bias-corrected Adam with decoupled weight decay on a ``name -> array`` dict."""
    if t < 1:
        raise ValueError("Adam iteration t must be >= 1")
    lr = lr_at(t, cfg)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = b1 * moments.m[name] + (1.0 - b1) * g
        v = b2 * moments.v[name] + (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_p[name] = p - lr * step - lr * cfg.weight_decay * p
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamMoments(new_m, new_v, t)


def adam_step(state: ModelState, grads, moments: AdamMoments, t: int, cfg: TrainConfig):
    params, moments = adam_update(state.params, grads, moments, t, cfg)
    return state.replace(params), moments


# -- data -------------------------------------------------------------------

@dataclass(eq=False)
class PreparedCase:
    """Everything the training loop needs for one heart."""

    name: str
    features: object
    graph: object
    labels: np.ndarray
    ed_positions: np.ndarray


def prepare_case(mesh: MeshSequence, labels=None, motion=True, thickness=True, name="") -> PreparedCase:
    hybrid = extract_hybrid_input(mesh)
    feats = assemble_features(mesh, hybrid, motion=motion, thickness=thickness)
    lab = None
    if labels is not None:
        lab = np.asarray(getattr(labels, "labels", labels), dtype=np.int8)
        if lab.size != hybrid.n_endo:
            raise ValueError(f"{name}: {lab.size} labels for {hybrid.n_endo} endocardial vertices")
    return PreparedCase(name, feats, build_graph(hybrid), lab,
                        mesh.positions[mesh.ed_phase, hybrid.endo_vertices])


def infer_case(state: ModelState, case: PreparedCase, threshold=0.5):
    logits, _ = forward(case.features, case.graph, state)
    return predict(logits, threshold), logits


def mean_dice(state, cases, threshold=0.5) -> float:
    return float(np.mean([dice(infer_case(state, c, threshold)[0], c.labels) for c in cases]))


# -- loop -------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    state: ModelState
    best_state: ModelState
    moments: AdamMoments
    log: list = field(default_factory=list)
    best_epoch: int = -1


def _write_run_config(out_dir, net_cfg, loss_cfg, train_cfg):
    doc = {"network": net_cfg.to_dict(), "loss": asdict(loss_cfg), "train": asdict(train_cfg)}
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(doc, fh, indent=1)


def train(train_cases, net_cfg: NetworkConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
          val_cases=(), out_dir=None, resume=False, epoch_callback=None) -> TrainResult:
    """Per-case forward/loss/backward/Adam over ``train_cfg.epochs`` epochs.

    Epoch ``e`` visits cases in the order of ``default_rng([seed, e])``.
    With ``out_dir``, ``last.ckpt`` (with Adam moments) and ``best.ckpt`` are
    written every epoch together with ``metrics.jsonl``; ``resume=True``
    continues from them and reproduces the uninterrupted run exactly.
    """
    if not train_cases:
        raise ValueError("empty training set")
    layout = train_cases[0].features.channel_layout
    state = init_parameters(net_cfg, train_cfg.seed, layout)
    moments = init_moments(state)
    best_state, best_score, best_epoch = state, -np.inf, -1
    history = []
    start = 0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_run_config(out_dir, net_cfg, loss_cfg, train_cfg)
        last_path = os.path.join(out_dir, "last.ckpt")
        best_path = os.path.join(out_dir, "best.ckpt")
        log_path = os.path.join(out_dir, "metrics.jsonl")
        if resume and os.path.exists(last_path):
            state, moments, header = load_checkpoint(last_path)
            start = header["extra"]["epochs_done"]
            best_score = header["extra"]["best_score"]
            best_epoch = header["extra"]["best_epoch"]
            best_state = load_checkpoint(best_path)[0] if os.path.exists(best_path) else state
            with open(log_path) as fh:
                history = [json.loads(line) for line in fh][:start]
        else:
            open(log_path, "w").close()

    n = len(train_cases)
    for epoch in range(start, train_cfg.epochs):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        losses = []
        for b0 in range(0, n, train_cfg.batch_size):
            batch = order[b0:b0 + train_cfg.batch_size]
            acc = None
            for idx in batch:
                case = train_cases[idx]
                logits, cache = forward(case.features, case.graph, state)
                loss, g_logits, _ = total_loss(logits, case.labels, loss_cfg)
                if not np.isfinite(loss):
                    if out_dir is not None:
                        save_checkpoint(os.path.join(out_dir, "diverged_last_finite.ckpt"), state, moments)
                    raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, case {case.name}")
                grads, _ = backward(cache, g_logits)
                losses.append(loss)
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] = acc[k] + grads[k]
            if len(batch) > 1:
                acc = {k: a / len(batch) for k, a in acc.items()}
            state, moments = adam_step(state, acc, moments, moments.t + 1, train_cfg)

        row = {"epoch": epoch, "step": moments.t, "lr": lr_at(moments.t, train_cfg),
               "train_loss": float(np.mean(losses))}
        if val_cases:
            row["val_dice"] = mean_dice(state, val_cases, train_cfg.threshold)
            score = row["val_dice"]
        else:
            score = -row["train_loss"]
        improved = score > best_score
        if improved:
            best_state, best_score, best_epoch = state, score, epoch
        history.append(row)
        log.info("epoch %d  loss %.4f  val_dice %s", epoch, row["train_loss"], row.get("val_dice"))
        if out_dir is not None:
            extra = {"epochs_done": epoch + 1, "best_score": float(best_score), "best_epoch": best_epoch}
            save_checkpoint(last_path, state, moments, extra)
            if improved:
                save_checkpoint(best_path, state, extra={"epoch": epoch, "score": float(score)})
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
        if epoch_callback is not None:
            epoch_callback(row, state)
    return TrainResult(state, best_state, moments, history, best_epoch)


# -- reference baseline ------------------------------------------------------

def mean_motion_magnitude(case: PreparedCase) -> np.ndarray:
    sl = case.features.channel_slice("motion")
    return np.linalg.norm(case.features.values[..., sl], axis=2).mean(axis=0)


def fit_motion_threshold(cases) -> float:
    """Threshold on mean motion magnitude (below = infarct) maximizing mean Dice."""
    mags = [mean_motion_magnitude(c) for c in cases]
    candidates = np.unique(np.quantile(np.concatenate(mags), np.linspace(0.0, 0.5, 501)))
    best_t, best = candidates[0], -1.0
    for t in candidates:
        score = np.mean([dice(m <= t, c.labels) for m, c in zip(mags, cases)])
        if score > best:
            best_t, best = t, score
    return float(best_t)


def motion_threshold_predict(case, threshold):
    return (mean_motion_magnitude(case) <= threshold).astype(np.int8)
