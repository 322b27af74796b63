"""Mean-teacher training loop with virtual-domain bridging and prototype heads."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import backbone, corrsynth, losses, mixing, protohead
from .backbone import BackboneArch, Params
from .losses import SupervisionPack
from .rng import Rng
from .synthdata import Dataset, load_dataset
from .tensor import Tensor, narrow, no_grad
from .tensorio import load_archive, save_archive

log = logging.getLogger(__name__)

# Rng stream ids
_INIT, _STEP, _LABELED_ORDER, _UNLABELED_ORDER = 0, 1, 2, 3

HISTORY_FIELDS = ["t", "L_in1", "L_out1", "L_in2", "L_out2", "total", "lr", "lambda_sim", "gamma"]


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_fix: float = 0.75
    alpha: float = 0.7
    tau_temp: float = 0.05
    tau: float = 0.95
    w_prime_ratio: float = 0.25
    ema_decay: float = 0.99
    lr0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # linear ramp of the learning rate over the first steps; 0 disables it
    warmup_steps: int = 200
    t_max: int = 2000
    batch_size: int = 4
    seed: int = 0
    labeled_domain: int = 0
    num_classes: int = 2
    levels: int = 3
    base_channels: int = 8
    feat_channels: int = 16
    # "bcmda" runs the full semi-supervised step; "supervised" trains on labeled data only
    mode: str = "bcmda"
    fixmix: bool = True
    pdmix: bool = True
    avg: bool = True
    pa: bool = True
    bpa: bool = True
    pplc: bool = True
    lr_schedule: str = "poly"
    dice_mode: str = "joint"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_fix", "tau", "w_prime_ratio", "ema_decay", "momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.ema_decay >= 1.0:
            raise ConfigError("ema_decay must be < 1")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even (half labeled, half unlabeled)")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.alpha <= 0 or self.tau_temp <= 0:
            raise ConfigError("alpha and tau_temp must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.mode not in ("bcmda", "supervised"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.lr_schedule not in ("poly", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.dice_mode not in ("joint", "per_class"):
            raise ConfigError(f"unknown dice_mode {self.dice_mode!r}")
        if self.pplc and not (self.pa or self.bpa):
            raise ConfigError("pplc needs prototype heads (pa or bpa)")

    @property
    def arch(self) -> BackboneArch:
        return BackboneArch(self.levels, self.base_channels, 1, self.feat_channels)

    @property
    def uses_prototypes(self) -> bool:
        return self.pa or self.bpa

    @classmethod
    def baseline(cls, **kw) -> "TrainConfig":
        """Bidirectional CutMix between real labeled and unlabeled images, nothing else."""
        kw = {"fixmix": False, "pdmix": False, "avg": False, "pa": False, "bpa": False, "pplc": False, **kw}
        return cls(**kw)


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def load_config(path) -> TrainConfig:
    """Flat ``key = value`` file; ``#`` starts a comment; unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# -- state -----------------------------------------------------------------


@dataclass
class TrainState:
    student: Params
    teacher: Params
    velocity: dict[str, np.ndarray]
    t: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    rng = Rng(cfg.seed).split(_INIT)
    student = backbone.init_backbone(cfg.arch, rng.split(0))
    student.update(protohead.init_heads(cfg.num_classes, cfg.feat_channels, rng.split(1)))
    teacher = backbone.clone_params(student)
    velocity = {k: np.zeros_like(v.data) for k, v in student.items()}
    return TrainState(student, teacher, velocity)


def lr_at(t: int, t_max: int, lr0: float, schedule: str = "poly", warmup: int = 0) -> float:
    """Poly decay ``lr0 (1 - t/t_max)^0.9`` (or constant), scaled by a linear
    warmup ``min(1, (t + 1) / warmup)`` when ``warmup > 0``.
    """
    rate = lr0 if schedule == "constant" else lr0 * (1.0 - t / t_max) ** 0.9
    if warmup > 0:
        rate *= min(1.0, (t + 1) / warmup)
    return rate


def prototype_sets(params: Mapping[str, Tensor], cfg: TrainConfig, t: int):
    """(virtual, real, averaged) prototypes for the enabled alignment variant, or None."""
    if cfg.bpa:
        return protohead.blend_weights(params["proto_w1"], params["proto_w2"], t, cfg.t_max)
    if cfg.pa:
        w = params["proto_w1"]
        return w, w, w
    return None


def teacher_probs(teacher: Params, feats: Tensor, cfg: TrainConfig, t: int) -> np.ndarray:
    """Corrected teacher prediction: linear head, overridden by confident cosine head pixels."""
    p_l = protohead.linear_forward(feats, teacher["linear_w"], teacher["linear_b"]).data
    if not cfg.pplc:
        return p_l
    _, _, w_avg = prototype_sets(teacher, cfg, t)
    p_c = protohead.cossim_forward(feats, w_avg, cfg.tau_temp).data
    return protohead.pplc(p_c, p_l, cfg.tau)


def _mix_pack(y1h: np.ndarray, pseudo: np.ndarray, p_avg: np.ndarray, mask: np.ndarray, tau: float):
    m = mask[None, None]
    ones = np.ones_like(p_avg)
    t_in, t_out = mixing.bcmix(y1h, pseudo, m)
    c_in, c_out = mixing.bcmix(ones, p_avg, m)
    return (
        SupervisionPack(t_in, c_in, losses.filter_mask(c_in, tau)),
        SupervisionPack(t_out, c_out, losses.filter_mask(c_out, tau)),
    )


@dataclass
class StepViews:
    """Intermediate images of one step, kept for inspection."""

    x_w: np.ndarray
    u_w: np.ndarray
    u_s: np.ndarray
    x_wu: np.ndarray
    u_wx: np.ndarray
    x_wv: np.ndarray
    u_wv: np.ndarray
    x_wdv: np.ndarray
    mixed: list[np.ndarray]
    corr: corrsynth.CorrelationPair
    packs: list[SupervisionPack]
    lambda_dyn: float


def build_views(
    teacher: Params,
    x: np.ndarray,
    y: np.ndarray,
    u: np.ndarray,
    u_domains: np.ndarray,
    cfg: TrainConfig,
    t: int,
    rng: Rng,
) -> StepViews:
    """Augment, synthesise virtual images, mix, and derive teacher supervision."""
    n = x.shape[0]
    xs, ys, uws, uss = [], [], [], []
    for i in range(n):
        xw, yw = mixing.weak_augment(x[i], y[i], rng.split(0, i))
        uw, _ = mixing.weak_augment(u[i], None, rng.split(1, i))
        xs.append(xw)
        ys.append(yw)
        uws.append(uw)
        uss.append(mixing.strong_augment(uw, rng.split(2, i)))
    x_w, y_w, u_w, u_s = (np.stack(a) for a in (xs, ys, uws, uss))
    h, w = x_w.shape[-2:]
    w_prime = max(1, int(round(w * cfg.w_prime_ratio)))

    with no_grad():
        ft = backbone.forward(teacher, np.concatenate([x_w, u_w]), cfg.arch)
        ft_x, ft_u = ft.data[:n], ft.data[n:]
        corr = corrsynth.compute_bcm(ft_x, ft_u, w_prime)
        x_wu = corrsynth.synthesize(u_w, corr.c_ux, h, w)
        u_wx = corrsynth.synthesize(x_w, corr.c_xu, h, w)

        if cfg.fixmix:
            x_wv = mixing.fixmix(x_w, x_wu, cfg.lambda_fix)
            u_wv = mixing.fixmix(u_w, u_wx, cfg.lambda_fix)
        else:
            x_wv, u_wv = x_w, u_w
        lam = 0.0
        if cfg.pdmix:
            sched = mixing.MixSchedule(cfg.lambda_fix, cfg.alpha, t, cfg.t_max)
            x_wdv, lam = mixing.pdmix(x_w, x_wu, sched, rng.split(3))
        else:
            x_wdv = x_w

        m1 = mixing.gen_mask(h, w, rng.split(4)).values
        m2 = mixing.gen_mask(h, w, rng.split(5)).values
        in1, out1 = mixing.bcmix(x_wv, u_wv, m1[None, None])
        in2, out2 = mixing.bcmix(x_wdv, u_s, m2[None, None])

        p_cr_w = teacher_probs(teacher, Tensor(ft_u), cfg, t)
        if cfg.avg:
            ft_uv = backbone.forward(teacher, u_wv, cfg.arch)
            p_cr_wv = teacher_probs(teacher, ft_uv, cfg, t)
            same = np.asarray(u_domains) == cfg.labeled_domain
            p_avg = losses.avg_probability(p_cr_wv, p_cr_w, same)
        else:
            p_avg = p_cr_w

    pseudo = losses.pseudo_label(p_avg)
    y1h = losses.one_hot(y_w, cfg.num_classes).astype(p_avg.dtype)
    packs = [*_mix_pack(y1h, pseudo, p_avg, m1, cfg.tau), *_mix_pack(y1h, pseudo, p_avg, m2, cfg.tau)]
    return StepViews(x_w, u_w, u_s, x_wu, u_wx, x_wv, u_wv, x_wdv, [in1, out1, in2, out2], corr, packs, lam)


def student_loss(student: Params, views: StepViews, cfg: TrainConfig, t: int):
    """Composite loss over the four mixed branches, one batched student forward."""
    n = views.x_w.shape[0]
    images = np.concatenate(views.mixed)
    feats = backbone.forward(student, images, cfg.arch)
    p_lin = protohead.linear_forward(feats, student["linear_w"], student["linear_b"])
    protos = prototype_sets(student, cfg, t)
    preds = []
    for k in range(4):
        sl = slice(k * n, (k + 1) * n)
        p_l = narrow(p_lin, sl.start, sl.stop)
        p_c = None
        if protos is not None:
            proto = protos[0] if k < 2 else protos[1]
            p_c = protohead.cossim_forward(narrow(feats, sl.start, sl.stop), proto, cfg.tau_temp)
        preds.append((p_l, p_c))
    return losses.composite_loss(views.packs, preds, cfg.dice_mode)


def supervised_loss(student: Params, x_w: np.ndarray, y_w: np.ndarray, cfg: TrainConfig):
    feats = backbone.forward(student, x_w, cfg.arch)
    p = protohead.linear_forward(feats, student["linear_w"], student["linear_b"])
    y1h = losses.one_hot(y_w, cfg.num_classes).astype(p.dtype)
    m = np.ones(y_w.shape, dtype=p.dtype)
    total = losses.seg_loss(y1h, p, m, cfg.dice_mode)
    return total, {}


def sgd_step(params: Params, velocity: dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float) -> list[str]:
    """Momentum SGD with coupled weight decay; returns the names that were updated."""
    updated = []
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data
        v = momentum * velocity[name] + g
        velocity[name] = v.astype(p.data.dtype)
        p.data = (p.data - lr * v).astype(p.data.dtype)
        p.grad = None
        updated.append(name)
    return updated


def parameter_audit(params: Params) -> list[str]:
    """Trainable tensors whose current gradient is missing or identically zero."""
    return sorted(k for k, p in params.items() if p.grad is None or not np.any(p.grad))


def _check_finite(total: Tensor, parts: dict[str, float], t: int) -> None:
    if np.isfinite(total.data).all():
        return
    bad = {k: v for k, v in parts.items() if not math.isfinite(v)} or parts
    raise TrainingDivergedError(f"non-finite loss at t={t}; offending branches: {json.dumps(bad)}")


def train_step(
    state: TrainState,
    labeled: tuple[np.ndarray, np.ndarray],
    unlabeled: tuple[np.ndarray, np.ndarray] | None,
    cfg: TrainConfig,
) -> TrainState:
    """One optimisation step; mutates and returns ``state``.

    ``labeled`` is (images N×1×H×W, labels N×H×W); ``unlabeled`` is
    (images N×1×H×W, domain ids N).
    """
    t = state.t
    rng = Rng(cfg.seed).split(_STEP, t)
    x, y = labeled
    if cfg.mode == "supervised":
        pairs = [mixing.weak_augment(x[i], y[i], rng.split(0, i)) for i in range(len(x))]
        x_w = np.stack([p[0] for p in pairs])
        y_w = np.stack([p[1] for p in pairs])
        total, parts = supervised_loss(state.student, x_w, y_w, cfg)
        gamma = 0.0
    else:
        u, u_dom = unlabeled
        views = build_views(state.teacher, x, y, u, u_dom, cfg, t, rng)
        total, parts = student_loss(state.student, views, cfg, t)
        gamma = mixing.gamma_schedule(t, cfg.t_max, cfg.lambda_fix)
    _check_finite(total, parts, t)
    total.backward()
    lr = lr_at(t, cfg.t_max, cfg.lr0, cfg.lr_schedule, cfg.warmup_steps)
    sgd_step(state.student, state.velocity, lr, cfg.momentum, cfg.weight_decay)
    backbone.ema_update(state.teacher, state.student, cfg.ema_decay)
    row = {"t": t, **{f"L_{k}": parts.get(k, float("nan")) for k in losses.BRANCHES}}
    row.update(total=float(total.data), lr=lr, lambda_sim=protohead.lambda_sim(t, cfg.t_max), gamma=gamma)
    state.history.append(row)
    state.t = t + 1
    return state


# -- data feeding -----------------------------------------------------------


def _cycle_indices(n: int, rng: Rng, step: int, count: int) -> list[int]:
    """Indices for ``count`` consecutive draws at ``step``; reshuffled every epoch, stateless."""
    out = []
    cache = {}
    for k in range(count):
        pos = step * count + k
        epoch, off = divmod(pos, n)
        if epoch not in cache:
            cache[epoch] = rng.split(epoch).permutation(n)
        out.append(int(cache[epoch][off]))
    return out


def fetch_batch(labeled: Dataset, unlabeled: Dataset, cfg: TrainConfig, t: int):
    half = cfg.batch_size // 2
    root = Rng(cfg.seed)
    li = _cycle_indices(len(labeled), root.split(_LABELED_ORDER), t, half)
    xs = np.stack([labeled[i].image for i in li])
    ys = np.stack([labeled[i].mask for i in li])
    if cfg.mode == "supervised":
        return (xs, ys), None
    ui = _cycle_indices(len(unlabeled), root.split(_UNLABELED_ORDER), t, half)
    us = np.stack([unlabeled[i].image for i in ui])
    ud = np.array([unlabeled[i].domain for i in ui])
    return (xs, ys), (us, ud)


def training_splits(ds: Dataset) -> tuple[Dataset, Dataset]:
    train = ds.select(split="train")
    labeled = train.select(labeled=True)
    unlabeled = train.select(labeled=False)
    if len(labeled) == 0:
        raise ValueError("dataset has no labeled training samples")
    return labeled, unlabeled


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(stem, state: TrainState, cfg: TrainConfig) -> None:
    tensors = {k: v.data for k, v in state.student.items()}
    tensors.update({f"teacher/{k}": v.data for k, v in state.teacher.items()})
    tensors.update({f"momentum/{k}": v for k, v in state.velocity.items()})
    meta = {"t": state.t, "config": dataclasses.asdict(cfg), "rng": Rng(cfg.seed).get_state()}
    save_archive(stem, tensors, meta)


def load_checkpoint(stem) -> tuple[TrainState, TrainConfig]:
    tensors, meta = load_archive(stem)
    if meta is None:
        raise ValueError(f"checkpoint {stem} has no metadata")
    cfg = TrainConfig(**meta["config"])
    student, teacher, velocity = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("teacher/"):
            teacher[name[8:]] = Tensor(arr)
        elif name.startswith("momentum/"):
            velocity[name[9:]] = arr
        else:
            student[name] = Tensor(arr, requires_grad=True)
    return TrainState(student, teacher, velocity, t=int(meta["t"])), cfg


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})


def read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "t" else float(v)) for k, v in r.items()} for r in rows]


def run_training(
    cfg: TrainConfig,
    manifest,
    out_dir,
    resume=None,
    stop_at: int | None = None,
    progress_every: int = 0,
) -> TrainState:
    """Train for ``cfg.t_max`` steps (or until ``stop_at``), writing
    ``out_dir/final.{bin,idx}`` and ``out_dir/history.csv``.
    """
    ds = load_dataset(manifest)
    labeled, unlabeled = training_splits(ds)
    if cfg.mode == "bcmda" and len(unlabeled) == 0:
        raise ValueError("dataset has no unlabeled training samples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state, saved_cfg = load_checkpoint(resume)
        if dataclasses.asdict(saved_cfg) != dataclasses.asdict(cfg):
            raise ConfigError("resume checkpoint was trained with a different config")
        hist_path = Path(resume).with_name("history.csv")
        if hist_path.exists():
            state.history = [r for r in read_history(hist_path) if r["t"] < state.t]
    else:
        state = init_state(cfg)
    end = cfg.t_max if stop_at is None else min(stop_at, cfg.t_max)
    while state.t < end:
        lab, unl = fetch_batch(labeled, unlabeled, cfg, state.t)
        try:
            train_step(state, lab, unl, cfg)
        except TrainingDivergedError as exc:
            (out / "divergence.txt").write_text(str(exc) + "\n", encoding="utf-8")
            raise
        if progress_every and state.t % progress_every == 0:
            log.info("t=%d loss=%.4f", state.t, state.history[-1]["total"])
        if cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0 and state.t < end:
            save_checkpoint(out / f"step{state.t:06d}", state, cfg)
            write_history(out / "history.csv", state.history)
    save_checkpoint(out / "final", state, cfg)
    write_history(out / "history.csv", state.history)
    return state


def infer(student: Params, image: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Label map from the student backbone and linear head only."""
    with no_grad():
        feats = backbone.forward(student, image, cfg.arch)
        p = protohead.linear_forward(feats, student["linear_w"], student["linear_b"])
    return p.data.argmax(axis=-3)
