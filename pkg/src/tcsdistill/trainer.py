"""Supervised losses, the combined distillation objective, and both training phases.

Phase one trains the teacher and coach side by side on their own pipelines
(noisy HD prior as input).  Phase two freezes them and trains a fresh student
on ``L_base + lambda1 * L_bev + lambda2 * L_output``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor
from .evalkit.metrics import MetricAccumulator, MetricsReport
from .msrd import build_mask, msrd_loss
from .nets import (
    BEV_WIDTH,
    NetParams,
    ParamStore,
    coach_forward,
    forward,
    init_params,
    save_params,
    student_forward,
    teacher_forward,
)
from .scenegen import Dataset, stack
from .tgpd import TgpdParams, TokenState, init_projection, init_tgpd, tgpd_total, tokenize

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "l_total", "l_base", "l_bev", "l_output", "miou_val", "map_val")


class TrainingDiverged(RuntimeError):
    pass


class FrozenViolation(AssertionError):
    pass


@dataclass
class LossWeights:
    alpha1: float = 0.1
    alpha2: float = 0.1
    lambda1: float = 0.5
    lambda2: float = 0.5
    beta1: float = 0.6
    beta2: float = 0.4
    tau: float = 1.0
    lambda_mse: float = 1.0
    gamma1: float = 0.7
    gamma2: float = 0.3

    def validate(self) -> None:
        for k, v in self.__dict__.items():
            if v < 0 or not math.isfinite(v):
                raise ValueError(f"loss weight {k} must be a finite non-negative number, got {v}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 1e-7
    grad_clip: float = 5.0
    seed: int = 0
    eval_every: int = 1
    two_stage: bool = False
    pseudo_lidar_pull: bool = False
    pseudo_lidar_weight: float = 1.0
    cache_references: bool = False
    calib_steps: int = 150
    calib_lr: float = 1e-2
    mask_dilation: int = 0
    patch_size: int = 4
    embed_dim: int = 32

    def validate(self) -> None:
        for k in ("epochs", "batch_size", "eval_every", "patch_size", "embed_dim"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        for k in ("lr", "grad_clip"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.weight_decay < 0 or self.calib_steps < 0 or self.mask_dilation < 0:
            raise ValueError("weight_decay, calib_steps and mask_dilation must be non-negative")


def distill_defaults(**overrides) -> TrainConfig:
    return TrainConfig(**{"epochs": 10, **overrides})


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    sq = 0.0
    for g in grads:
        sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
                   cfg: TrainConfig, betas=(0.9, 0.999), eps: float = 1e-8) -> float:
    """Adam with decoupled weight decay after global-norm clipping (in place)."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise dc.ShapeError("optimizer_step", p.shape, g.shape)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    norm = clip_by_global_norm(grads, cfg.grad_clip)
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p -= cfg.lr * cfg.weight_decay * p
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm


class Adam:
    def __init__(self, tensors: list[Tensor], cfg: TrainConfig):
        self.tensors = tensors
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> float:
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.tensors]
        norm = optimizer_step([t.data for t in self.tensors], grads, self.state, self.cfg)
        for t in self.tensors:
            t.grad = None
        return norm


# ---------------------------------------------------------------- losses

def _instance_index(gt_inst: np.ndarray):
    """Flatten per-class instance rasters into (pixel, instance) memberships.

    Instances of all classes share one embedding space per sample.  Returns
    pixel indices into the (B*H*W) grid, the global instance id of each
    membership, and the sample each instance belongs to.
    """
    B, C, H, W = gt_inst.shape
    pix, ids, owner = [], [], []
    k = 0
    for b in range(B):
        for c in range(C):
            lab = gt_inst[b, c].ravel()
            n = int(lab.max())
            if not n:
                continue
            fg = np.flatnonzero(lab)
            pix.append(fg + b * H * W)
            ids.append(lab[fg].astype(np.int64) - 1 + k)
            owner.extend([b] * n)
            k += n
    if not k:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(pix), np.concatenate(ids), np.asarray(owner)


def discriminative_loss(embed: Tensor, gt_inst: np.ndarray, delta_v: float = 0.5,
                        delta_d: float = 3.0, reg: float = 1e-3) -> Tensor:
    """Pull embeddings to their instance mean, push instance means apart.

    Per sample: mean hinged pull over instances, mean hinged push over
    ordered pairs of distinct instances, and a small norm penalty on the
    means; the result is averaged over samples with at least one instance.
    """
    B, E, H, W = embed.shape
    if gt_inst.shape[0] != B or gt_inst.shape[2:] != (H, W):
        raise dc.ShapeError("discriminative_loss", embed.shape, gt_inst.shape)
    pix, ids, owner = _instance_index(gt_inst)
    K = len(owner)
    if not K:
        return dc.sum(embed) * 0.0
    flat = dc.reshape(dc.permute(embed, (0, 2, 3, 1)), (B * H * W, E))
    ep = dc.take(flat, pix)                                    # (P, E)
    onehot = np.zeros((K, len(pix)))
    onehot[ids, np.arange(len(pix))] = 1.0
    counts = onehot.sum(axis=1)
    mu = dc.matmul(Tensor(onehot / counts[:, None]), ep)       # (K, E)
    dist = dc.sqrt(dc.sum(dc.square(ep - dc.take(mu, ids)), axis=-1) + 1e-8)
    hinge = dc.square(dc.relu(dist - delta_v))                 # (P,)
    per_sample = np.bincount(owner, minlength=B)
    n_samples = int(np.count_nonzero(per_sample))
    w_inst = 1.0 / (per_sample[owner] * n_samples)             # (K,)
    pull = dc.sum(dc.reshape(hinge, (1, len(pix))) * (onehot * (w_inst / counts)[:, None]))
    norms = dc.sqrt(dc.sum(dc.square(mu), axis=-1) + 1e-8)
    loss = pull + dc.sum(norms * w_inst) * reg
    same = (owner[:, None] == owner[None, :]) & ~np.eye(K, dtype=bool)
    if same.any():
        kb = per_sample[owner].astype(np.float64)
        w_pair = np.where(same, 1.0 / (kb * np.maximum(kb - 1, 1) * n_samples)[:, None], 0.0)
        diff = dc.reshape(mu, (K, 1, E)) - dc.reshape(mu, (1, K, E))
        md = dc.sqrt(dc.sum(dc.square(diff), axis=-1) + 1e-8)
        loss = loss + dc.sum(dc.square(dc.relu(2.0 * delta_d - md)) * w_pair)
    return loss


def base_loss(logits: Tensor, embed: Tensor | None, gt_sem: np.ndarray, gt_inst: np.ndarray,
              alpha1: float = 0.1, alpha2: float = 0.1) -> dict[str, Tensor]:
    """Segmentation BCE + alpha1 * instance-embedding loss + alpha2 * direction loss.

    Direction labels do not exist for synthetic scenes, so that term is zero.
    """
    if logits.shape != gt_sem.shape:
        raise dc.ShapeError("base_loss", logits.shape, gt_sem.shape)
    seg = dc.mean(dc.bce_with_logits(logits, gt_sem))
    if embed is None or alpha1 == 0.0:
        dist = Tensor(0.0)
    else:
        dist = discriminative_loss(embed, gt_inst)
    direction = Tensor(0.0)
    total = seg + dist * alpha1 + direction * alpha2
    return {"total": total, "seg": seg, "dist": dist, "dir": direction}


@dataclass
class Reference:
    """Frozen reference outputs for one batch: logits and token state."""

    logits: np.ndarray
    tokens: TokenState | None


def total_loss(student_out, student_tokens: TokenState | None, teacher: Reference | None,
               coach: Reference | None, gt_sem: np.ndarray, gt_inst: np.ndarray,
               w: LossWeights, mask_dilation: int = 0) -> dict[str, Tensor]:
    """L_base + lambda1 * L_bev + lambda2 * L_output with an itemised breakdown."""
    parts = base_loss(student_out.logits, student_out.embed, gt_sem, gt_inst, w.alpha1, w.alpha2)
    total = parts["total"]
    bev = Tensor(0.0)
    output = Tensor(0.0)
    if teacher is not None:
        if student_tokens is not None and teacher.tokens is not None:
            bev = tgpd_total(student_tokens, teacher.tokens, coach.tokens if coach else None,
                             w.beta1, w.beta2, w.tau, w.lambda_mse)
        mask = build_mask(gt_sem, mask_dilation)
        output = msrd_loss(student_out.logits, teacher.logits, coach.logits if coach else None,
                           mask, w.gamma1, w.gamma2)
        total = total + bev * w.lambda1 + output * w.lambda2
    return {"total": total, "base": parts["total"], "seg": parts["seg"], "dist": parts["dist"],
            "bev": bev, "output": output}


# ---------------------------------------------------------------- data plumbing

INPUT_FIELDS = ("cam_view", "lidar_view", "sd_prior", "hd_noisy", "gt_sem", "gt_inst")


def make_batch(data: Dataset, idx) -> dict[str, np.ndarray]:
    samples = [data[int(i)] for i in idx]
    return {k: stack(samples, k) for k in INPUT_FIELDS}


def epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite ({value})")


def evaluate(params: NetParams, data: Dataset, batch_size: int = 16, name: str = "",
             seed: int | None = None) -> MetricsReport:
    acc = MetricAccumulator()
    for i in range(0, len(data), batch_size):
        batch = make_batch(data, range(i, min(i + batch_size, len(data))))
        out = forward(params, batch)
        acc.update(out.logits.data, batch["gt_sem"], batch["gt_inst"])
    return acc.report(name=name or params.role, seed=seed)


class MetricLog:
    """Per-epoch training log with the fixed CSV header."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"], r["step"]] + [_fmt(r.get(k)) for k in LOG_COLUMNS[2:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _fmt(v) -> str:
    return "" if v is None else f"{v:.10f}"


# ---------------------------------------------------------------- phase one

@dataclass
class PretrainResult:
    teacher: NetParams
    coach: NetParams | None
    logs: dict[str, MetricLog]
    reports: dict[str, MetricsReport]
    step_losses: dict[str, list] = field(default_factory=dict)


def pretrain_teacher_coach(cfg: TrainConfig, train: Dataset, val: Dataset | None = None,
                           with_coach: bool = True, ckpt_dir=None) -> PretrainResult:
    """Train teacher and coach in one loop over shared batches, then freeze both."""
    cfg.validate()
    teacher = init_params("teacher", cfg.seed)
    coach = init_params("coach", cfg.seed) if with_coach else None
    models = {"teacher": teacher} if coach is None else {"teacher": teacher, "coach": coach}
    opts = {r: Adam(list(p), cfg) for r, p in models.items()}
    logs = {r: MetricLog() for r in models}
    step_losses = {r: [] for r in models}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = {r: 0.0 for r in models}
        batches = epoch_batches(len(train), cfg.batch_size, rng)
        for idx in batches:
            batch = make_batch(train, idx)
            step += 1
            with Tape() as tape:
                t_out = teacher_forward(teacher, batch["cam_view"], batch["lidar_view"],
                                        batch["sd_prior"], batch["hd_noisy"])
                t_loss = base_loss(t_out.logits, t_out.embed, batch["gt_sem"], batch["gt_inst"], 0.1, 0.1)["total"]
            _check_finite(t_loss.item(), "teacher loss")
            tape.backward(t_loss)
            opts["teacher"].step()
            sums["teacher"] += t_loss.item()
            step_losses["teacher"].append(t_loss.item())
            if coach is not None:
                with Tape() as tape:
                    c_out = coach_forward(coach, batch["cam_view"], batch["sd_prior"], batch["hd_noisy"])
                    c_loss = base_loss(c_out.logits, c_out.embed, batch["gt_sem"], batch["gt_inst"], 0.1, 0.1)["total"]
                    if cfg.pseudo_lidar_pull:
                        c_loss = c_loss + dc.mean(dc.square(c_out.geo - t_out.geo.data)) * cfg.pseudo_lidar_weight
                _check_finite(c_loss.item(), "coach loss")
                tape.backward(c_loss)
                opts["coach"].step()
                sums["coach"] += c_loss.item()
                step_losses["coach"].append(c_loss.item())
        for role, p in models.items():
            rep = None
            if val is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                rep = evaluate(p, val)
            mean_loss = sums[role] / len(batches)
            logs[role].add(epoch=epoch, step=step, l_total=mean_loss, l_base=mean_loss, l_bev=0.0,
                           l_output=0.0, miou_val=rep.miou if rep else None, map_val=rep.map if rep else None)
            log.info("pretrain %s epoch %d loss %.5f%s", role, epoch, mean_loss,
                     f" mIoU {rep.miou:.4f} mAP {rep.map:.4f}" if rep else "")
            if ckpt_dir is not None:
                save_params(p, Path(ckpt_dir) / f"{role}.ckpt")
    for p in models.values():
        p.freeze()
    if ckpt_dir is not None:
        for role, p in models.items():
            save_params(p, Path(ckpt_dir) / f"{role}.ckpt")
    reports = {}
    if val is not None:
        reports = {r: evaluate(p, val) for r, p in models.items()}
    return PretrainResult(teacher, coach, logs, reports, step_losses)


# ---------------------------------------------------------------- reference tokens

def _patch_targets(gt_sem: np.ndarray, cell: int) -> np.ndarray:
    """Class occupancy per token: global fractions first, then per patch."""
    B, C, H, W = gt_sem.shape
    patches = gt_sem.reshape(B, C, H // cell, cell, W // cell, cell).mean(axis=(3, 5))
    patches = patches.reshape(B, C, -1).transpose(0, 2, 1)
    glob = gt_sem.mean(axis=(2, 3))[:, None, :]
    return np.concatenate([glob, patches], axis=1)


def _ref_forward(p: NetParams, batch) -> "object":
    return forward(p, batch, hd_key="hd_noisy")


def calibrate_projection(p: NetParams, store: ParamStore, train: Dataset, cfg: TrainConfig,
                         seed: int) -> None:
    """Fit a frozen reference's patch/global projections with a linear occupancy probe.

    The probe regresses per-token class occupancy from the token embedding,
    which anchors each reference's embedding space to map structure before
    the student is asked to match it.  Attention projections are untouched.
    """
    if cfg.calib_steps == 0:
        return
    rng = np.random.default_rng(np.random.SeedSequence([seed, 211, len(p.role)]))
    D = store["patch.w"].shape[1]
    probe = ParamStore()
    probe.add("w", rng.normal(0, 1 / math.sqrt(D), (D, 3)))
    probe.add("b", np.zeros(3))
    tensors = [store["patch.w"], store["patch.b"], store["token.w"], store["token.b"], probe["w"], probe["b"]]
    for t in tensors:
        t.requires_grad = True
    opt = Adam(tensors, TrainConfig(lr=cfg.calib_lr, weight_decay=0.0, grad_clip=cfg.grad_clip))
    cell = 2 * cfg.patch_size
    for _ in range(cfg.calib_steps):
        idx = rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        batch = make_batch(train, idx)
        feat = Tensor(_ref_forward(p, batch).bev.data)
        target = _patch_targets(batch["gt_sem"], cell)
        with Tape() as tape:
            tok = tokenize(feat, store, cfg.patch_size)
            pred = dc.linear(tok.seq, probe["w"], probe["b"])
            loss = dc.mean(dc.square(pred - target * 10.0))
        tape.backward(loss)
        opt.step()
    for t in store:
        t.requires_grad = False


@dataclass
class ReferenceCache:
    """Per-sample frozen outputs for teacher (and coach): logits and tokens."""

    logits: dict[str, np.ndarray]
    seq: dict[str, np.ndarray]
    attn_logits: dict[str, np.ndarray]

    def get(self, role: str, idx) -> Reference:
        if role not in self.logits:
            return None
        idx = np.asarray(idx)
        s = Tensor(self.seq[role][idx])
        a = Tensor(self.attn_logits[role][idx])
        tok = TokenState(patches=Tensor(s.data[:, 1:]), glob=Tensor(s.data[:, :1]), seq=s,
                         attn_logits=a, attn=Tensor(np.zeros(0)))
        return Reference(self.logits[role][idx], tok)


def build_reference_cache(refs: dict[str, NetParams], tgpd: TgpdParams, data: Dataset,
                          batch_size: int = 16) -> ReferenceCache:
    logits, seq, attn = {}, {}, {}
    for role, p in refs.items():
        chunks_l, chunks_s, chunks_a = [], [], []
        for i in range(0, len(data), batch_size):
            batch = make_batch(data, range(i, min(i + batch_size, len(data))))
            out = _ref_forward(p, batch)
            tok = tokenize(Tensor(out.bev.data), tgpd.stores[role], tgpd.patch_size)
            chunks_l.append(out.logits.data)
            chunks_s.append(tok.seq.data)
            chunks_a.append(tok.attn_logits.data)
        logits[role] = np.concatenate(chunks_l)
        seq[role] = np.concatenate(chunks_s)
        attn[role] = np.concatenate(chunks_a)
    return ReferenceCache(logits, seq, attn)


def prepare_references(teacher: NetParams, coach: NetParams | None, train: Dataset,
                       cfg: TrainConfig, seed: int = 0) -> tuple[TgpdParams, ReferenceCache]:
    """Calibrate reference projections and cache frozen outputs on ``train``."""
    roles = ("student", "teacher") + (("coach",) if coach is not None else ())
    tgpd = init_tgpd(seed, roles=roles, patch_size=cfg.patch_size, embed_dim=cfg.embed_dim)
    refs = {"teacher": teacher} if coach is None else {"teacher": teacher, "coach": coach}
    for role, p in refs.items():
        if not p.frozen:
            raise FrozenViolation(f"{role} must be frozen before distillation")
        calibrate_projection(p, tgpd.stores[role], train, cfg, seed)
    return tgpd, build_reference_cache(refs, tgpd, train)


# ---------------------------------------------------------------- phase two

@dataclass
class DistillResult:
    student: NetParams
    projection: ParamStore
    log: MetricLog
    report: MetricsReport | None
    init_digest: str = ""


def distill_student(cfg: TrainConfig, train: Dataset, val: Dataset | None, teacher: NetParams | None,
                    coach: NetParams | None, w: LossWeights, references=None) -> DistillResult:
    """Train a student from scratch against frozen references.

    ``teacher=None`` gives the plain supervised baseline.  ``cfg.two_stage``
    drops the coach entirely.  ``references`` may carry a precomputed
    ``(TgpdParams, ReferenceCache)`` pair so several runs can share them.
    """
    cfg.validate()
    w.validate()
    if cfg.two_stage:
        coach = None
    for role, p in (("teacher", teacher), ("coach", coach)):
        if p is not None and not p.frozen:
            raise FrozenViolation(f"{role} parameters must be frozen during distillation")
    student = init_params("student", cfg.seed)
    projection = init_projection(BEV_WIDTH["student"], cfg.patch_size, cfg.embed_dim, cfg.seed, key=0)
    init_digest = student.digest()
    tensors = list(student)
    cache = None
    if teacher is not None:
        tensors += list(projection)
        if references is None:
            tgpd, cache = prepare_references(teacher, coach, train, cfg, seed=cfg.seed)
        else:
            tgpd, cache = references
        if not cfg.cache_references:
            cache = _LiveReferences(teacher, coach, tgpd, train)
    opt = Adam(tensors, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 303]))
    mlog = MetricLog()
    step = 0
    report = None
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        batches = epoch_batches(len(train), cfg.batch_size, rng)
        for idx in batches:
            batch = make_batch(train, idx)
            step += 1
            t_ref = c_ref = None
            if cache is not None:
                t_ref = cache.get("teacher", idx)
                c_ref = cache.get("coach", idx) if coach is not None else None
            with Tape() as tape:
                out = student_forward(student, batch["cam_view"])
                tokens = tokenize(out.bev, projection, cfg.patch_size) if t_ref is not None else None
                parts = total_loss(out, tokens, t_ref, c_ref, batch["gt_sem"], batch["gt_inst"], w,
                                   cfg.mask_dilation)
            total = parts["total"].item()
            _check_finite(total, "distillation loss")
            tape.backward(parts["total"])
            for p in (teacher, coach):
                if p is not None and any(t.grad is not None for t in p):
                    raise FrozenViolation("a frozen reference received a gradient")
            opt.step()
            sums += [total, parts["base"].item(), parts["bev"].item(), parts["output"].item()]
        rep = None
        if val is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            rep = evaluate(student, val, seed=cfg.seed)
            report = rep
        means = sums / len(batches)
        mlog.add(epoch=epoch, step=step, l_total=means[0], l_base=means[1], l_bev=means[2],
                 l_output=means[3], miou_val=rep.miou if rep else None, map_val=rep.map if rep else None)
        log.info("distill epoch %d total %.5f base %.5f bev %.5f out %.5f%s", epoch, *means,
                 f" mIoU {rep.miou:.4f} mAP {rep.map:.4f}" if rep else "")
    return DistillResult(student, projection, mlog, report, init_digest)


def train_baseline(cfg: TrainConfig, train: Dataset, val: Dataset | None) -> DistillResult:
    """Student trained on the supervised loss alone (no references at all)."""
    return distill_student(cfg, train, val, None, None, LossWeights(lambda1=0.0, lambda2=0.0))


class _LiveReferences:
    """Uncached reference provider: recomputes frozen forwards every step."""

    def __init__(self, teacher, coach, tgpd: TgpdParams, data: Dataset):
        self.models = {"teacher": teacher, "coach": coach}
        self.tgpd = tgpd
        self.data = data

    def get(self, role: str, idx) -> Reference | None:
        p = self.models.get(role)
        if p is None:
            return None
        batch = make_batch(self.data, idx)
        out = _ref_forward(p, batch)
        tok = tokenize(Tensor(out.bev.data), self.tgpd.stores[role], self.tgpd.patch_size)
        return Reference(out.logits.data, tok.detached())
