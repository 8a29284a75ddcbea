"""Training: Adam, the slope schedule, content- and segmentation-aware runs.

A run trains a :class:`Microscope`, which bundles the illumination patterns
(learned bank or fixed scheme), the inverse model and, for segmentation, a
head. Content training has two phases: the inverse model alone for
``epoch_baseline`` epochs, then patterns and inverse jointly while the
sigmoid slope ``m`` follows :func:`update_m`. Segmentation training appends
a head (stage 2, everything else frozen) and then fine-tunes all parts
(stage 3).

Random streams are derived from the run seed with ``SeedSequence.spawn`` so
that weight init, data order, augmentation and detector noise are
independent and individually reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import baseline_patterns
from .config import ExperimentConfig
from .data import ImageDataset, SegDataset, augment_batch
from .inverse import InverseModel, SegmentationHead
from .metrics import mse as mse_metric
from .metrics import ssim as ssim_metric
from .optics import (
    NORMALIZATION,
    ExcitationPatternBank,
    ForwardConfig,
    forward_pass,
    generate_patterns,
    init_pattern_bank,
)
from .tensor import Tensor, backward, l1_mean, no_grad
from .tensor import ops
from .tensor.io import FormatError, load_archive, save_archive

CHECKPOINT_FORMAT = 1
LOG_COLUMNS = ("epoch", "phase", "m", "train_l1", "val_l1", "val_mse", "val_ssim")


class DivergenceError(RuntimeError):
    """A training loss became NaN or infinite."""


# -- losses -------------------------------------------------------------------

def l1_loss(recon: Tensor, target: Tensor) -> Tensor:
    if recon.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {recon.shape} vs {target.shape}")
    return l1_mean(recon, target)


def bce_loss(prob: Tensor, target: Tensor, eps: float = 1e-6) -> Tensor:
    if prob.shape != target.shape:
        raise ValueError(f"bce_loss: shape mismatch {prob.shape} vs {target.shape}")
    p = ops.clamp_min(prob, eps)
    q = ops.clamp_min(1.0 - prob, eps)
    t = target
    loss = ops.mul(t, ops.log(p)) + ops.mul(1.0 - t, ops.log(q))
    return -ops.mean(loss)


# -- Adam ---------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: OptimState) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if any(g is None for g in grads):
        raise ValueError("adam_step: missing gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError("moment shape does not match parameter")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array([self.state.step], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        return out


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= p.grad.dtype.type(factor)
    return total


# -- slope schedule -----------------------------------------------------------

@dataclass
class MSchedule:
    epoch_baseline: int
    epoch_cutoff: int
    epoch_step: int
    m_current: float = 1.0

    def __post_init__(self):
        for name in ("epoch_baseline", "epoch_cutoff", "epoch_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epoch_baseline > self.epoch_cutoff:
            raise ValueError("epoch_baseline must not exceed epoch_cutoff")

    def advance(self, epoch: int) -> tuple[float, bool]:
        m, joint = update_m(epoch, self)
        self.m_current = m
        return m, joint


def update_m(epoch: int, sched: MSchedule) -> tuple[int, bool]:
    """Slope ``m`` and joint-training flag for ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    joint = epoch > sched.epoch_baseline
    if joint and epoch > sched.epoch_cutoff:
        if sched.epoch_step == 0:
            raise ValueError("epoch_step = 0 past the cutoff")
        return 1 + max(0, (epoch - sched.epoch_cutoff) // sched.epoch_step), joint
    return 1, joint


class PlateauDetector:
    """True once ``patience`` epochs pass without improving by more than ``delta``."""

    def __init__(self, patience: int = 20, delta: float = 1e-4):
        self.patience, self.delta = patience, delta
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.delta:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# -- model bundle -------------------------------------------------------------

def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("patterns", "inverse", "order", "augment", "noise", "head")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


class Microscope:
    """Patterns, forward optics and inverse model for one experiment."""

    def __init__(self, cfg: ExperimentConfig, streams=None, dtype=np.float32):
        streams = streams if streams is not None else seed_streams(cfg.seed)
        self.cfg = cfg
        self.optics = ForwardConfig(k=cfg.k, sigma_read=cfg.sigma_read, gamma=cfg.gamma, n=cfg.n,
                                    noise_enabled=cfg.noise)
        self.bank: ExcitationPatternBank | None = None
        self.fixed: np.ndarray | None = None
        if cfg.scheme == "learned":
            self.bank = init_pattern_bank(cfg.T, cfg.P, dtype=dtype, rng=streams["patterns"],
                                          frequency_domain=cfg.pattern_domain == "frequency")
        else:
            seed = int(streams["patterns"].integers(2 ** 31))
            self.fixed = baseline_patterns(cfg.scheme, cfg.T, cfg.P, seed=seed, dtype=dtype)
        self.inverse = InverseModel(cfg.T, cfg.P, cfg.n, upsampler=cfg.upsampler, widths=cfg.widths,
                                    dtype=dtype, rng=streams["inverse"])
        self.head: SegmentationHead | None = None
        self._head_rng = streams["head"]
        self.dtype = dtype

    @property
    def learnable_patterns(self) -> bool:
        return self.bank is not None

    @property
    def m(self) -> float:
        return self.bank.m if self.bank is not None else 1.0

    def set_m(self, m: float) -> None:
        if self.bank is not None:
            self.bank.m = float(m)

    def add_head(self) -> SegmentationHead:
        if self.head is None:
            self.head = SegmentationHead(self.cfg.seg_width, rng=self._head_rng, dtype=self.dtype)
        return self.head

    def pattern_params(self) -> list[Tensor]:
        return self.bank.parameters() if self.bank is not None else []

    def patterns(self, track: bool) -> Tensor:
        """Current patterns; a graph is built only when ``track`` is set."""
        if self.bank is None:
            return Tensor(self.fixed)
        if track:
            return generate_patterns(self.bank)
        with no_grad():
            return Tensor(generate_patterns(self.bank).data)

    def pattern_array(self) -> np.ndarray:
        return self.patterns(track=False).data.copy()

    def measure(self, X: Tensor, H: Tensor, rng) -> Tensor:
        return forward_pass(X, H, self.optics, rng=rng)

    def reconstruct(self, X: Tensor, rng, track_patterns: bool = False) -> Tensor:
        return self.inverse(self.measure(X, self.patterns(track_patterns), rng))

    def train(self, mode: bool = True) -> None:
        self.inverse.train(mode)
        if self.head is not None:
            self.head.train(mode)

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        if self.bank is not None:
            state.update({k: v.data for k, v in self.bank.named_parameters().items()})
        else:
            state["pattern_bank.H_fixed"] = self.fixed
        state.update(self.inverse.state_dict("inverse."))
        if self.head is not None:
            state.update(self.head.state_dict("seg_head."))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if self.bank is not None:
            for key, p in self.bank.named_parameters().items():
                if key not in state:
                    raise KeyError(f"missing parameter {key}")
                p.data[...] = state[key]
        else:
            if "pattern_bank.H_fixed" not in state:
                raise KeyError("missing parameter pattern_bank.H_fixed")
            self.fixed = state["pattern_bank.H_fixed"].astype(self.dtype)
        self.inverse.load_state_dict(state, "inverse.")
        if any(k.startswith("seg_head.") for k in state):
            self.add_head().load_state_dict(state, "seg_head.")


# -- checkpoints --------------------------------------------------------------

def run_metadata(cfg: ExperimentConfig, model: Microscope, **extra) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "compression": str(cfg.compression),
        "m": model.m,
        "normalization": NORMALIZATION,
        "decisions": {
            "widths": list(cfg.widths),
            "channel_expansion": "conv3x3-relu x2, no pooling",
            "upsampler_weights": "D x D x T x n^2 per-pixel matrices",
            "init": "He fan-in for convs, N(0, 1/n) for upsampler weights",
            "batch_norm": "momentum 0.1, eps 1e-5",
            "clip_norm_joint": cfg.clip_norm,
            "plateau": cfg.plateau,
            "seed_streams": "SeedSequence(seed).spawn: patterns, inverse, order, augment, noise, head",
        },
        **extra,
    }


def save_checkpoint(path, model: Microscope, cfg: ExperimentConfig, **extra) -> None:
    save_archive(path, model.state_dict(), run_metadata(cfg, model, **extra))


def load_checkpoint(path, dtype=np.float32) -> tuple[Microscope, dict]:
    """Rebuild the model stored in a checkpoint; raises FormatError on version mismatch."""
    state, meta = load_archive(path)
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise FormatError(f"checkpoint format {meta.get('format_version')!r}, expected {CHECKPOINT_FORMAT}")
    cfg_dict = dict(meta["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    cfg = ExperimentConfig(**cfg_dict)
    model = Microscope(cfg, dtype=dtype)
    model.load_state_dict(state)
    model.set_m(meta.get("m", 1.0))
    return model, meta


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalResult:
    recon: np.ndarray
    readings: np.ndarray
    l1: float
    mse: float
    ssim: float
    seg: np.ndarray | None = None


def evaluate(model: Microscope, images: np.ndarray, noise_seed: int, batch: int = 32,
             with_seg: bool = False) -> EvalResult:
    """Inference with a fixed detector-noise seed, so repeated calls agree."""
    rng = np.random.default_rng(noise_seed)
    modes = [(m, m.training) for m in (model.inverse, model.head) if m is not None]
    model.train(False)
    H = model.patterns(track=False)
    recons, reads, segs = [], [], []
    with no_grad():
        for s in range(0, len(images), batch):
            X = Tensor(images[s:s + batch, None])
            y = model.measure(X, H, rng)
            r = model.inverse(y)
            reads.append(y.data)
            recons.append(r.data[:, 0])
            if with_seg and model.head is not None:
                segs.append(model.head(r).data[:, 0])
    for module, mode in modes:
        module.train(mode)
    recon = np.concatenate(recons)
    imgs = np.asarray(images, dtype=np.float64)
    l1 = float(np.mean(np.abs(recon.astype(np.float64) - imgs)))
    return EvalResult(recon=recon, readings=np.concatenate(reads), l1=l1, mse=mse_metric(recon, imgs),
                      ssim=float(np.mean([ssim_metric(a, b) for a, b in zip(recon, imgs)])),
                      seg=np.concatenate(segs) if segs else None)


# -- logging ------------------------------------------------------------------

class MetricLog:
    """Append-only CSV log; kept in memory as well for callers."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                self.path.write_text(",".join(LOG_COLUMNS) + "\n")

    def append(self, **row) -> None:
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow([_fmt(row[c]) for c in LOG_COLUMNS])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# -- training loops -----------------------------------------------------------

@dataclass
class TrainResult:
    model: Microscope
    log: MetricLog
    checkpoint: Path | None
    epochs_run: int
    baseline_epoch: int


def _check_finite(value: float, epoch: int, phase: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at epoch {epoch} ({phase})")


def _batches(n: int, batch: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[s:s + batch] for s in range(0, n, batch)]


def _inputs(items: np.ndarray, idx, augment: bool, rng) -> np.ndarray:
    X = items[idx]
    return augment_batch(X, rng) if augment else X


def train_content(cfg: ExperimentConfig, data: dict[str, ImageDataset], out_dir=None,
                  model: Microscope | None = None, progress=None) -> TrainResult:
    """Two-phase content-aware training; see module docstring."""
    streams = seed_streams(cfg.seed)
    model = model if model is not None else Microscope(cfg, streams)
    train_items = data["train"].items
    val_items = data["val"].items if "val" in data else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = MetricLog(out / "metrics.csv" if out is not None else None)

    sched = MSchedule(cfg.epoch_baseline, cfg.epoch_cutoff, cfg.epoch_step)
    inv_params = model.inverse.parameters()
    opt_inv = Adam(inv_params, cfg.lr_inverse)
    opt_pat = Adam(model.pattern_params(), cfg.lr_forward) if model.learnable_patterns else None
    plateau = PlateauDetector(cfg.plateau_patience, cfg.plateau_delta) if cfg.plateau else None
    shift = 0  # how far plateau detection moved the schedule forward
    baseline_epoch = cfg.epoch_baseline
    ckpt = None

    for epoch in range(1, cfg.epochs + 1):
        m, joint = update_m(epoch + shift, sched)
        joint_patterns = joint and model.learnable_patterns
        model.set_m(m)
        phase = "joint" if joint else "inverse"
        total, count = 0.0, 0
        for idx in _batches(len(train_items), cfg.batch, streams["order"]):
            X = Tensor(_inputs(train_items, idx, cfg.augment, streams["augment"])[:, None])
            recon = model.reconstruct(X, streams["noise"], track_patterns=joint_patterns)
            loss = l1_loss(recon, X)
            value = loss.item()
            _check_finite(value, epoch, phase)
            opt_inv.zero_grad()
            if opt_pat is not None:
                opt_pat.zero_grad()
            backward(loss)
            if joint:
                active = inv_params + (model.pattern_params() if joint_patterns else [])
                clip_global_norm(active, cfg.clip_norm)
            opt_inv.step()
            if joint_patterns:
                opt_pat.step()
            total += value * len(idx)
            count += len(idx)
        row = dict(epoch=epoch, phase=phase, m=m, train_l1=total / count,
                   val_l1=float("nan"), val_mse=float("nan"), val_ssim=float("nan"))
        if val_items is not None:
            ev = evaluate(model, val_items, cfg.eval_noise_seed, cfg.batch)
            row.update(val_l1=ev.l1, val_mse=ev.mse, val_ssim=ev.ssim)
            if plateau is not None and not joint and plateau.update(ev.l1) and epoch < cfg.epoch_baseline:
                # start the joint phase now; cutoff and step keep their offsets
                shift = cfg.epoch_baseline - epoch
                baseline_epoch = epoch
        log.append(**row)
        if progress is not None:
            progress(row)
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_epoch{epoch:05d}.dtns", model, cfg, epoch=epoch, phase=phase)

    if out is not None:
        ckpt = out / "final.dtns"
        save_checkpoint(ckpt, model, cfg, epoch=cfg.epochs, phase="final", baseline_epoch=baseline_epoch)
    return TrainResult(model, log, ckpt, cfg.epochs, baseline_epoch)


def _seg_objective(cfg: ExperimentConfig, prob: Tensor, gt: Tensor) -> Tensor:
    return bce_loss(prob, gt) if cfg.seg_loss == "bce" else l1_loss(prob, gt)


def binarize(prob: np.ndarray, level: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) > level).astype(np.float32)


def mean_iou(prob: np.ndarray, gt: np.ndarray) -> float:
    from .metrics import iou
    return float(np.mean([iou(binarize(p), g) for p, g in zip(prob, gt)]))


def _seg_epochs(cfg, model, train: SegDataset, val: SegDataset | None, streams, log, stage: int,
                params, opts, out, progress):
    epochs = cfg.seg_head_epochs if stage == 2 else cfg.seg_finetune_epochs
    phase = f"seg{stage}"
    items, masks = train.images.items, train.masks
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(items), cfg.batch, streams["order"]):
            if cfg.augment:
                both = augment_batch(np.stack([items[idx], masks[idx]], axis=1), streams["augment"])
                Xb, Gb = both[:, 0], both[:, 1]
            else:
                Xb, Gb = items[idx], masks[idx]
            X, G = Tensor(Xb[:, None]), Tensor(Gb[:, None])
            if stage == 2:
                with no_grad():
                    recon = Tensor(model.reconstruct(X, streams["noise"]).data)
            else:
                recon = model.reconstruct(X, streams["noise"], track_patterns=model.learnable_patterns)
            loss = _seg_objective(cfg, model.head(recon), G)
            value = loss.item()
            _check_finite(value, epoch, phase)
            for o in opts:
                o.zero_grad()
            backward(loss)
            if stage == 3:
                clip_global_norm(params, cfg.clip_norm)
            for o in opts:
                o.step()
            total += value * len(idx)
            count += len(idx)
        row = dict(epoch=epoch, phase=phase, m=model.m, train_l1=total / count,
                   val_l1=float("nan"), val_mse=float("nan"), val_ssim=float("nan"))
        if val is not None:
            ev = evaluate(model, val.images.items, cfg.eval_noise_seed, cfg.batch, with_seg=True)
            row.update(val_l1=float(np.mean(np.abs(ev.seg - val.masks))), val_mse=ev.mse, val_ssim=ev.ssim)
        log.append(**row)
        if progress is not None:
            progress(row)


def train_segmentation(cfg: ExperimentConfig, data: dict[str, SegDataset], out_dir, stage: int | None = None,
                       progress=None) -> dict[str, Path]:
    """Three-stage segmentation-aware training.

    Stage 1 is content training (on the images alone), stage 2 trains the
    head with patterns and inverse frozen, stage 3 fine-tunes all parts on
    the segmentation objective. Each stage writes ``stage{k}.dtns``; stage
    ``k`` refuses to start without the stage ``k-1`` checkpoint. ``stage``
    selects a single stage, ``None`` runs whichever stages are missing.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {f"stage{k}": out / f"stage{k}.dtns" for k in (1, 2, 3)}
    stages = [stage] if stage is not None else [k for k in (1, 2, 3) if not paths[f"stage{k}"].exists()]
    for k in stages:
        if k not in (1, 2, 3):
            raise ValueError(f"unknown stage {k}")
        if k > 1 and not paths[f"stage{k - 1}"].exists():
            raise FileNotFoundError(f"stage {k} needs the stage {k - 1} checkpoint {paths[f'stage{k - 1}']}")
        if k == 1:
            images = {s: d.images for s, d in data.items()}
            res = train_content(cfg, images, out / "stage1_run", progress=progress)
            save_checkpoint(paths["stage1"], res.model, cfg, stage=1, epoch=cfg.epochs)
            continue
        model, _ = load_checkpoint(paths[f"stage{k - 1}"])
        streams = seed_streams(cfg.seed + 1000 * k)
        head = model.add_head()
        log = MetricLog(out / "metrics.csv")
        if k == 2:
            model.inverse.eval()  # frozen: running statistics stay put
            params = head.parameters()
            opts = [Adam(params, cfg.lr_inverse)]
        else:
            params = model.inverse.parameters() + head.parameters() + model.pattern_params()
            opts = [Adam(model.inverse.parameters() + head.parameters(), cfg.lr_inverse)]
            if model.learnable_patterns:
                opts.append(Adam(model.pattern_params(), cfg.lr_forward))
        _seg_epochs(cfg, model, data["train"], data.get("val"), streams, log, k, params, opts, out, progress)
        save_checkpoint(paths[f"stage{k}"], model, cfg, stage=k)
    return paths


def write_effective_config(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.cfg"
    path.write_text(cfg.dumps())
    (out / "run.json").write_text(json.dumps({"package_version": __version__,
                                              "checkpoint_format": CHECKPOINT_FORMAT,
                                              "seed": cfg.seed, "eval_noise_seed": cfg.eval_noise_seed,
                                              "compression": str(cfg.compression)}, indent=2) + "\n")
    return path
