"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The benchmark criteria (distillation benefit, component ordering, two- vs
three-stage) share a single session fixture that trains everything once on
the default synthetic benchmark.  Run with ``pytest -v -s`` to see the
timing lines, or read the ``ACCEPT`` lines in the captured output.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from tcsdistill import cli
from tcsdistill import diffcore as dc
from tcsdistill.container import ContainerError
from tcsdistill.diffcore import Tensor, grad_check
from tcsdistill.evalkit import bench_fps
from tcsdistill.evalkit.ablation import run_ablation
from tcsdistill.msrd import msrd_loss
from tcsdistill.nets import init_params, load_params, param_count, save_params
from tcsdistill.scenegen import GenConfig, generate_dataset, load_dataset, save_dataset
from tcsdistill.tgpd import init_projection, pair_terms, tgpd_pair_loss, tgpd_total, tokenize
from tcsdistill.trainer import (
    LossWeights,
    TrainConfig,
    distill_student,
    make_batch,
    prepare_references,
    pretrain_teacher_coach,
    train_baseline,
)

pytestmark = pytest.mark.slow

GRAD_TOL = 1e-4
N_SHAPES = 5
BENCH_SEEDS = (0, 1, 2)
BENCH_DATA_SEED = 0
BENCH_PRETRAIN_EPOCHS = 16
BENCH_CONFIGS = ("baseline", "a", "b", "c", "f")
TIE = 0.3  # mIoU / mAP points


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nACCEPT {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")


# ---------------------------------------------------------------- 1

def _primitive_cases(r: np.random.Generator):
    """(name, f, leaves) per primitive op for one random shape draw."""
    B, C = int(r.integers(1, 3)), int(r.integers(1, 4))
    H, W = 2 * int(r.integers(1, 4)), 2 * int(r.integers(1, 4))
    N, D = int(r.integers(2, 6)), int(r.integers(2, 6))
    x = Tensor(r.normal(size=(B, C, H, W)))
    y = Tensor(r.normal(size=(B, C, H, W)))
    pos = Tensor(r.uniform(0.5, 2.0, size=(B, C, H, W)))
    m = Tensor(r.normal(size=(B, N, D)))
    m2 = Tensor(r.normal(size=(D, N)))
    wq, wk, wv = (Tensor(r.normal(size=(D, D)) / math.sqrt(D)) for _ in range(3))
    lb = Tensor(r.normal(size=(N,)))
    xc = Tensor(r.normal(size=(B, C, int(r.integers(3, 8)), int(r.integers(3, 8)))))
    cw = Tensor(r.normal(size=(int(r.integers(1, 4)), C, 3, 3)))
    cb = Tensor(r.normal(size=(cw.shape[0],)))
    stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
    target = r.random((B, C, H, W))
    mask = r.random((B, C, H, W)) > 0.4
    mask.flat[0] = True
    idx = r.integers(0, B * N, size=7)
    tau = float(r.uniform(0.5, 2.0))

    def probe_sum(t):
        p = np.random.default_rng(t.data.size).normal(size=t.shape)
        return dc.sum(t * p)

    return [
        ("add", lambda: probe_sum(dc.add(x, y)), [x, y]),
        ("sub", lambda: probe_sum(dc.sub(x, y)), [x, y]),
        ("mul", lambda: probe_sum(dc.mul(x, y)), [x, y]),
        ("div", lambda: probe_sum(dc.div(x, pos)), [x, pos]),
        ("relu", lambda: probe_sum(dc.relu(x)), [x]),
        ("sigmoid", lambda: probe_sum(dc.sigmoid(x)), [x]),
        ("exp", lambda: probe_sum(dc.exp(x * 0.5)), [x]),
        ("log", lambda: probe_sum(dc.log(pos)), [pos]),
        ("sqrt", lambda: probe_sum(dc.sqrt(pos)), [pos]),
        ("square", lambda: probe_sum(dc.square(x)), [x]),
        ("log_sigmoid", lambda: probe_sum(dc.log_sigmoid(x)), [x]),
        ("bce_with_logits", lambda: dc.mean(dc.bce_with_logits(x, target)), [x]),
        ("sum", lambda: probe_sum(dc.sum(x, axis=1)), [x]),
        ("mean", lambda: probe_sum(dc.mean(x, axis=(2, 3), keepdims=True)), [x]),
        ("reshape", lambda: probe_sum(dc.reshape(x, (B, -1))), [x]),
        ("permute", lambda: probe_sum(dc.permute(x, (0, 2, 3, 1))), [x]),
        ("transpose_last", lambda: probe_sum(dc.transpose_last(m)), [m]),
        ("concat", lambda: probe_sum(dc.concat([x, y], axis=2)), [x, y]),
        ("concat_channels", lambda: probe_sum(dc.concat_channels([x, y])), [x, y]),
        ("masked_select", lambda: probe_sum(dc.masked_select(x, mask)), [x]),
        ("take", lambda: probe_sum(dc.take(dc.reshape(m, (B * N, D)), idx)), [m]),
        ("matmul", lambda: probe_sum(dc.matmul(m, m2)), [m, m2]),
        ("linear", lambda: probe_sum(dc.linear(m, m2, lb)), [m, m2, lb]),
        ("softmax_rows", lambda: probe_sum(dc.softmax_rows(m, tau)), [m]),
        ("log_softmax_rows", lambda: probe_sum(dc.log_softmax_rows(m, tau)), [m]),
        ("scaled_dot_attention", lambda: probe_sum(dc.scaled_dot_attention(m, wq, wk, wv, tau)[2]),
         [m, wq, wk, wv]),
        ("conv2d", lambda: probe_sum(dc.conv2d(xc, cw, cb, stride, pad)), [xc, cw, cb]),
        ("avg_pool_full", lambda: probe_sum(dc.avg_pool_full(x)), [x]),
        ("avg_pool2d", lambda: probe_sum(dc.avg_pool2d(x, 2)), [x]),
        ("upsample_nearest", lambda: probe_sum(dc.upsample_nearest(x, 2)), [x]),
        ("patchify", lambda: probe_sum(dc.patchify(x, 2)), [x]),
    ]


def _loss_cases(r: np.random.Generator):
    B, C = int(r.integers(1, 3)), int(r.integers(2, 5))
    H, W = 2 * int(r.integers(1, 4)), 2 * int(r.integers(1, 4))
    f = Tensor(r.normal(size=(B, C, H, W)))
    stu = init_projection(C, 2, 6, seed=int(r.integers(1 << 30)))
    ref = init_projection(3, 2, 6, seed=int(r.integers(1 << 30)))
    rf = r.normal(size=(B, 3, H, W))
    tea = tokenize(Tensor(rf), ref, 2).detached()
    coa = tokenize(Tensor(rf[:, ::-1].copy()), ref, 2).detached()
    leaves_t = [f] + [stu[k] for k in ("patch.w", "patch.b", "token.w", "token.b", "wq", "wk")]
    s = Tensor(r.normal(0, 2, size=(B, 3, H, W)))
    t_logits, c_logits = r.normal(0, 2, size=(2, B, 3, H, W))
    mask = r.random((B, 3, H, W)) < 0.5
    mask.flat[0] = True
    tau = float(r.uniform(0.5, 2.0))
    return [
        ("tgpd", lambda: tgpd_total(tokenize(f, stu, 2), tea, coa, 0.6, 0.4, tau=tau), leaves_t),
        ("msrd", lambda: msrd_loss(s, t_logits, c_logits, mask, 0.7, 0.3), [s]),
    ]


def test_c01_gradient_soundness(capsys):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for shape_seed in range(N_SHAPES):
        r = np.random.default_rng(9000 + shape_seed)
        for name, f, leaves in _primitive_cases(r) + _loss_cases(r):
            for leaf in leaves:
                leaf.requires_grad = True
            err = max(grad_check(f, leaves))
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - t0
    missing = sorted(n for n in dc.__all__ if callable(getattr(dc, n)) and n in _OP_NAMES and n not in worst)
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    ok = not bad and not missing and elapsed < 120 and min(counts.values()) >= N_SHAPES
    report(capsys, 1, ok, f"{len(worst)} ops/losses x {N_SHAPES} shapes, max rel err "
           f"{max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.1f}s; bad={bad} missing={missing}")
    assert ok


_OP_NAMES = {"add", "sub", "mul", "div", "relu", "sigmoid", "exp", "log", "sqrt", "square", "log_sigmoid",
             "bce_with_logits", "sum", "mean", "reshape", "permute", "transpose_last", "concat",
             "concat_channels", "masked_select", "take", "matmul", "linear", "softmax_rows",
             "log_softmax_rows", "scaled_dot_attention", "conv2d", "avg_pool_full", "avg_pool2d",
             "upsample_nearest", "patchify"}


# ---------------------------------------------------------------- 2

def test_c02_loss_identities(capsys):
    rng = np.random.default_rng(2)
    store = init_projection(8, 4, 32, seed=3)
    feat = Tensor(rng.normal(size=(2, 8, 8, 16)))
    tok = tokenize(feat, store, 4)
    self_loss = tgpd_pair_loss(tok, tok.detached()).item()

    kl_min = math.inf
    for _ in range(1000):
        B, L = int(rng.integers(1, 4)), int(rng.integers(2, 9))
        scale = float(rng.choice([0.1, 1.0, 10.0, 50.0]))
        a = Tensor(rng.normal(0, scale, size=(B, L, 4)))
        b = Tensor(rng.normal(0, scale, size=(B, L, 4)))
        ta, tb = tokenize_like(a, rng, L), tokenize_like(b, rng, L)
        kl, _ = pair_terms(ta, tb, float(rng.uniform(0.2, 3.0)))
        kl_min = min(kl_min, kl.item())

    locality_ok = True
    for _ in range(1000):
        shape = (int(rng.integers(1, 3)), 3, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        s, t, c = rng.normal(0, 3, size=(3,) + shape)
        mask = rng.random(shape) < rng.uniform(0.1, 0.9)
        base = msrd_loss(Tensor(s), t, c, mask).item()
        free = np.flatnonzero(~mask)
        if free.size == 0:
            continue
        hit = rng.choice(free, size=int(rng.integers(1, free.size + 1)), replace=False)
        s2, t2, c2 = s.copy(), t.copy(), c.copy()
        for arr in (s2, t2, c2):
            arr.flat[hit] += rng.normal(0, 100, size=hit.size)
        if msrd_loss(Tensor(s2), t2, c2, mask).item() != base:
            locality_ok = False

    mask = np.zeros((1, 3, 2, 2), bool)
    mask[0, 2, 0, 1] = True
    ln2 = msrd_loss(Tensor(np.zeros((1, 3, 2, 2))), np.zeros((1, 3, 2, 2)), None, mask, 1.0, 0.0).item()
    ln2_err = abs(ln2 - math.log(2))

    ok = self_loss == 0.0 and kl_min >= 0.0 and locality_ok and ln2_err < 1e-12
    report(capsys, 2, ok, f"tgpd(x,x)={self_loss!r}, min KL over 1000 fuzz={kl_min:.3e}, "
           f"mask-locality 1000 cases exact={locality_ok}, |single cell - ln2|={ln2_err:.1e}")
    assert ok


def tokenize_like(logits: Tensor, rng, L):
    """A token state whose attention logits are ``logits`` directly."""
    from tcsdistill.tgpd import TokenState
    B = logits.shape[0]
    seq = Tensor(rng.normal(size=(B, L, 3)))
    return TokenState(seq, seq, seq, dc.matmul(logits, dc.transpose_last(logits)), None)


# ---------------------------------------------------------------- shared small-scale data

@pytest.fixture(scope="module")
def small():
    g = GenConfig()
    train, val = generate_dataset(g, 7, "train", 24), generate_dataset(g, 7, "val", 8)
    pre = pretrain_teacher_coach(TrainConfig(epochs=1, seed=7), train, val)
    cfg = TrainConfig(epochs=2, seed=3, calib_steps=10, eval_every=1)
    return train, val, pre.teacher, pre.coach, cfg


# ---------------------------------------------------------------- 3

def test_c03_degenerate_weights(capsys, small):
    train, val, teacher, coach, cfg = small
    refs = prepare_references(teacher, coach, train, cfg)
    zero = distill_student(cfg, train, val, teacher, coach, LossWeights(lambda1=0.0, lambda2=0.0), refs)
    base = train_baseline(cfg, train, val)
    # l_bev / l_output log the unweighted distillation terms, so they are not compared
    same_base = zero.student.to_bytes() == base.student.to_bytes() and \
        _training_columns(zero.log) == _training_columns(base.log)

    no_coach = distill_student(cfg, train, val, teacher, coach, LossWeights(beta2=0.0, gamma2=0.0), refs)
    two = distill_student(dataclasses.replace(cfg, two_stage=True), train, val, teacher, None,
                          LossWeights(beta2=0.0, gamma2=0.0), refs)
    same_two = no_coach.student.to_bytes() == two.student.to_bytes() and \
        no_coach.log.to_csv() == two.log.to_csv()
    ok = same_base and same_two
    report(capsys, 3, ok, f"lambda=0 vs baseline bit-identical={same_base}; "
           f"beta2=gamma2=0 vs two-stage bit-identical={same_two}")
    assert ok


def _training_columns(mlog) -> list[list[str]]:
    keep = ("epoch", "step", "l_total", "l_base", "miou_val", "map_val")
    rows = list(csv.DictReader(mlog.to_csv().splitlines()))
    return [[r[k] for k in keep] for r in rows]


# ---------------------------------------------------------------- 4

def test_c04_frozen_references(capsys, small, tmp_path):
    train, val, teacher, coach, cfg = small
    save_params(teacher, tmp_path / "teacher.ckpt")
    save_params(coach, tmp_path / "coach.ckpt")
    before = {n: (tmp_path / n).read_bytes() for n in ("teacher.ckpt", "coach.ckpt")}
    t, c = load_params(tmp_path / "teacher.ckpt"), load_params(tmp_path / "coach.ckpt")
    t.freeze()
    c.freeze()
    distill_student(cfg, train, val, t, c, LossWeights())
    save_params(t, tmp_path / "teacher_after.ckpt")
    save_params(c, tmp_path / "coach_after.ckpt")
    same = all(before[n] == (tmp_path / n.replace(".ckpt", "_after.ckpt")).read_bytes() for n in before)
    unchanged_files = all(before[n] == (tmp_path / n).read_bytes() for n in before)
    ok = same and unchanged_files
    report(capsys, 4, ok, f"teacher/coach bytes identical after full distillation={same}, "
           f"files untouched={unchanged_files}")
    assert ok


# ---------------------------------------------------------------- 5, 6, 7

@pytest.fixture(scope="session")
def benchmark():
    """Default benchmark: 512/128 scenes, one shared teacher/coach, 3 student seeds."""
    timings = {}
    t0 = time.perf_counter()
    g = GenConfig()
    train = generate_dataset(g, BENCH_DATA_SEED, "train", g.n_train)
    val = generate_dataset(g, BENCH_DATA_SEED, "val", g.n_val)
    timings["gen"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pre = pretrain_teacher_coach(TrainConfig(epochs=BENCH_PRETRAIN_EPOCHS, seed=0, eval_every=10 ** 6),
                                 train, val)
    timings["pretrain"] = time.perf_counter() - t0

    cfg = TrainConfig(epochs=10, eval_every=10 ** 6, cache_references=True)
    t0 = time.perf_counter()
    refs = prepare_references(pre.teacher, pre.coach, train, cfg, seed=0)
    timings["references"] = time.perf_counter() - t0

    per_config = {}
    runs = []
    for name in BENCH_CONFIGS:
        t0 = time.perf_counter()
        table = run_ablation([name], train, val, pre.teacher, pre.coach, cfg, seeds=BENCH_SEEDS,
                             references=refs)
        per_config[name] = time.perf_counter() - t0
        runs += table.runs
    timings["runs"] = per_config
    return {"runs": runs, "timings": timings, "teacher": pre.reports["teacher"], "coach": pre.reports["coach"]}


def _metric(bench, config, field, seed=None):
    vals = [getattr(r.report, field) for r in bench["runs"]
            if r.config == config and (seed is None or r.seed == seed)]
    return 100.0 * float(np.mean(vals))


def test_c05_distillation_benefit(capsys, benchmark):
    t = benchmark["timings"]
    runtime = t["gen"] + t["pretrain"] + t["references"] + t["runs"]["baseline"] + t["runs"]["f"]
    d_miou = _metric(benchmark, "f", "miou") - _metric(benchmark, "baseline", "miou")
    d_map = _metric(benchmark, "f", "map") - _metric(benchmark, "baseline", "map")
    per_seed = [(_metric(benchmark, "f", "miou", s) - _metric(benchmark, "baseline", "miou", s),
                 _metric(benchmark, "f", "map", s) - _metric(benchmark, "baseline", "map", s))
                for s in BENCH_SEEDS]
    seeds_ok = all(a > 0 and b > 0 for a, b in per_seed)
    ok = d_miou >= 2.0 and d_map >= 2.0 and seeds_ok and runtime <= 30 * 60
    seeds_txt = ", ".join(f"s{s}:{a:+.2f}/{b:+.2f}" for s, (a, b) in zip(BENCH_SEEDS, per_seed))
    report(capsys, 5, ok, f"full - baseline: mIoU {d_miou:+.2f}, mAP {d_map:+.2f} (need >= +2.00 each); "
           f"per seed mIoU/mAP [{seeds_txt}]; runtime {runtime / 60:.1f} min (limit 30); "
           f"teacher mIoU {100 * benchmark['teacher'].miou:.2f}, coach {100 * benchmark['coach'].miou:.2f}")
    assert ok


def test_c06_component_ordering(capsys, benchmark):
    m = {c: _metric(benchmark, c, "miou") for c in BENCH_CONFIGS}
    # each single-component run must beat the baseline and lose to the combination
    single_ok = m["baseline"] < m["a"] and m["baseline"] < m["b"]
    both_ok = max(m["a"], m["b"]) < m["c"]
    full_ok = m["c"] <= m["f"] + TIE
    ok = single_ok and both_ok and full_ok
    report(capsys, 6, ok, "mean mIoU " + ", ".join(f"{k}={v:.2f}" for k, v in m.items())
           + f"; baseline<a,b={single_ok}, a,b<c={both_ok}, c<=f(+{TIE})={full_ok}")
    assert ok


def test_c07_three_vs_two_stage(capsys, benchmark):
    two, three = _metric(benchmark, "c", "map"), _metric(benchmark, "f", "map")
    ok = three >= two - TIE
    report(capsys, 7, ok, f"mAP three-stage {three:.2f} vs two-stage {two:.2f} "
           f"(need >= {two - TIE:.2f}); strictly higher={three > two}")
    assert ok


# ---------------------------------------------------------------- 8

def test_c08_student_faster_and_smaller(capsys):
    data = generate_dataset(GenConfig(), 0, "val", 8)
    batch = make_batch(data, range(8))
    student, teacher = init_params("student", 0), init_params("teacher", 0)
    wins = []
    rates = []
    for _ in range(3):
        s = bench_fps(student, batch, iters=30).fps
        t = bench_fps(teacher, batch, iters=30).fps
        wins.append(s > t)
        rates.append((s, t))
    ps, pt = param_count(student), param_count(teacher)
    ok = all(wins) and ps < pt
    report(capsys, 8, ok, "fps student/teacher " + ", ".join(f"{s:.1f}/{t:.1f}" for s, t in rates)
           + f"; params {ps} < {pt}")
    assert ok


# ---------------------------------------------------------------- 9

def _pipeline(root: Path) -> dict[str, bytes]:
    sets = []
    for kv in ("gen.n_train=16", "gen.n_val=8", "pretrain.epochs=1", "distill.epochs=2",
               "distill.calib_steps=10", "ablate.seeds=0,1"):
        sets += ["--set", kv]
    steps = [
        ["gen", "--out", root / "data"],
        ["pretrain", "--data", root / "data", "--out", root / "refs"],
        ["distill", "--data", root / "data", "--refs", root / "refs", "--out", root / "student"],
        ["eval", "--data", root / "data", "--ckpt", root / "student" / "student.ckpt",
         "--ckpt", root / "refs" / "teacher.ckpt", "--ckpt", root / "refs" / "coach.ckpt", "--out", root / "eval"],
        ["ablate", "table4", "--data", root / "data", "--refs", root / "refs", "--out", root / "ablate"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv] + sets) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_c09_determinism(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    a = _pipeline(tmp_path / "run1")
    b = _pipeline(tmp_path / "run2")
    ok = a == b and len(a) >= 5
    diff = [k for k in a if a.get(k) != b.get(k)]
    report(capsys, 9, ok, f"{len(a)} metric/log CSVs compared across two runs; differing={diff}")
    assert ok


# ---------------------------------------------------------------- 10

def _reject_all(path: Path, loader, rng, n_flips: int = 300) -> tuple[int, int]:
    raw = path.read_bytes()
    rejected = 0
    positions = rng.choice(len(raw), size=min(n_flips, len(raw)), replace=False)
    bad = path.with_suffix(".bad")
    for pos in positions:
        buf = bytearray(raw)
        buf[pos] ^= 1 << int(rng.integers(8))
        bad.write_bytes(bytes(buf))
        try:
            loader(bad)
        except ContainerError:
            rejected += 1
    for cut in rng.choice(len(raw), size=50, replace=False):
        bad.write_bytes(raw[:cut])
        try:
            loader(bad)
        except ContainerError:
            rejected += 1
    return rejected, len(positions) + 50


def test_c10_container_integrity(capsys, tmp_path):
    rng = np.random.default_rng(10)
    data = generate_dataset(GenConfig(), 3, "train", 6)
    save_dataset(data, tmp_path / "d.tcsd")
    back = load_dataset(tmp_path / "d.tcsd")
    data_ok = back.config == data.config and all(
        all(np.array_equal(a, b) and a.dtype == b.dtype for a, b in zip(x.arrays().values(), y.arrays().values()))
        and x.seed == y.seed for x, y in zip(data.samples, back.samples))
    save_dataset(back, tmp_path / "d2.tcsd")
    data_ok = data_ok and (tmp_path / "d.tcsd").read_bytes() == (tmp_path / "d2.tcsd").read_bytes()

    p = init_params("coach", 4)
    save_params(p, tmp_path / "c.ckpt")
    q = load_params(tmp_path / "c.ckpt")
    ckpt_ok = q.role == p.role and q.to_bytes() == p.to_bytes()
    save_params(q, tmp_path / "c2.ckpt")
    ckpt_ok = ckpt_ok and (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "c2.ckpt").read_bytes()

    rd, nd = _reject_all(tmp_path / "d.tcsd", load_dataset, rng)
    rc, nc = _reject_all(tmp_path / "c.ckpt", load_params, rng)
    ok = data_ok and ckpt_ok and rd == nd and rc == nc
    report(capsys, 10, ok, f"dataset round-trip={data_ok}, checkpoint round-trip={ckpt_ok}; "
           f"corrupted/truncated rejected: dataset {rd}/{nd}, checkpoint {rc}/{nc}")
    assert ok
