"""Named ablation configurations and the harness that runs them.

Every run builds a fresh student and optimizer from its seed; the frozen
teacher/coach and their cached reference outputs are shared read-only.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..nets import init_params
from ..trainer import LossWeights, TrainConfig, distill_student
from .metrics import REPORT_COLUMNS, MetricsReport

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationConfig:
    name: str
    overrides: tuple = ()      # (field, value) pairs applied to LossWeights
    two_stage: bool = False    # coach removed entirely
    label: str = ""

    def weights(self, base: LossWeights) -> LossWeights:
        return dataclasses.replace(base, **dict(self.overrides))


def _cfg(name, label, two_stage=False, **overrides) -> AblationConfig:
    return AblationConfig(name, tuple(sorted(overrides.items())), two_stage, label)


CONFIGS = {c.name: c for c in [
    _cfg("baseline", "no distillation", lambda1=0.0, lambda2=0.0),
    _cfg("a", "output only", two_stage=True, lambda1=0.0, beta2=0.0, gamma2=0.0),
    _cfg("b", "feature only", two_stage=True, lambda2=0.0, beta2=0.0, gamma2=0.0),
    _cfg("c", "feature + output", two_stage=True, beta2=0.0, gamma2=0.0),
    _cfg("d", "coach + output", lambda1=0.0),
    _cfg("e", "coach + feature", lambda2=0.0),
    _cfg("f", "coach + feature + output"),
    _cfg("two_stage", "teacher only", two_stage=True, beta2=0.0, gamma2=0.0),
    _cfg("three_stage", "teacher + coach"),
]}

BETA_GRID = ((0.8, 0.2), (0.6, 0.4), (0.5, 0.5), (0.4, 0.6))
GAMMA_GRID = ((0.8, 0.2), (0.7, 0.3), (0.6, 0.4), (0.5, 0.5))
for _b1, _b2 in BETA_GRID:
    _c = _cfg(f"beta_{_b1}_{_b2}", f"beta=({_b1},{_b2})", beta1=_b1, beta2=_b2)
    CONFIGS[_c.name] = _c
for _g1, _g2 in GAMMA_GRID:
    _c = _cfg(f"gamma_{_g1}_{_g2}", f"gamma=({_g1},{_g2})", gamma1=_g1, gamma2=_g2)
    CONFIGS[_c.name] = _c

MATRICES = {
    "table3": ("baseline", "a", "b", "c", "d", "e", "f"),
    "table4": ("two_stage", "three_stage"),
    "beta": tuple(f"beta_{a}_{b}" for a, b in BETA_GRID),
    "gamma": tuple(f"gamma_{a}_{b}" for a, b in GAMMA_GRID),
}

SUMMARY_COLUMNS = ["config", "label", "n_seeds"] + REPORT_COLUMNS[1:-1]
RUN_COLUMNS = ["config", "seed"] + REPORT_COLUMNS[1:-1] + ["init_sha"]


class UnknownConfig(KeyError):
    pass


def resolve(matrix) -> tuple[str, ...]:
    """Config names for a matrix name, a single config name, or a list of names."""
    if isinstance(matrix, str):
        if matrix in MATRICES:
            return MATRICES[matrix]
        names = (matrix,)
    else:
        names = tuple(matrix)
    for n in names:
        if n not in CONFIGS:
            raise UnknownConfig(f"unknown ablation config {n!r}; known: {', '.join(sorted(CONFIGS))}")
    return names


@dataclass
class AblationRun:
    config: str
    seed: int
    report: MetricsReport
    init_sha: str


@dataclass
class AblationTable:
    matrix: str
    runs: list

    def mean(self, config: str, field: str = "miou") -> float:
        vals = [getattr(r.report, field) for r in self.runs if r.config == config]
        if not vals:
            raise UnknownConfig(f"no runs for {config!r}")
        return float(np.mean(vals))

    def by_config(self, config: str) -> list[AblationRun]:
        return [r for r in self.runs if r.config == config]

    def summary_rows(self) -> list[list[str]]:
        """One row per config: seed-averaged metrics in the report column order."""
        rows = []
        for name in dict.fromkeys(r.config for r in self.runs):
            runs = self.by_config(name)
            vals = [np.mean([r.report.iou[i] for r in runs]) for i in range(3)]
            vals.append(np.mean([r.report.miou for r in runs]))
            vals += [np.mean([r.report.ap_class[i] for r in runs]) for i in range(3)]
            vals.append(np.mean([r.report.map for r in runs]))
            rows.append([name, CONFIGS[name].label, str(len(runs))] + [f"{v:.6f}" for v in vals])
        return rows

    def to_csv(self, path=None) -> str:
        """Seed-averaged table, one row per config."""
        return _write(SUMMARY_COLUMNS, self.summary_rows(), path)

    def runs_csv(self, path=None) -> str:
        """Per-run table with the initial-parameter checksum of every run."""
        rows = [[r.config, str(r.seed)] + r.report.row()[1:-1] + [r.init_sha[:16]] for r in self.runs]
        return _write(RUN_COLUMNS, rows, path)


def _write(header, rows, path) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# Shared read-only state for worker processes (inherited through fork).
_SHARED: dict = {}


def _run_one(name: str, seed: int) -> AblationRun:
    s = _SHARED
    conf = CONFIGS[name]
    cfg = dataclasses.replace(s["cfg"], seed=seed, two_stage=conf.two_stage)
    expected = init_params("student", seed).digest()
    res = distill_student(cfg, s["train"], s["val"], s["teacher"], s["coach"],
                          conf.weights(s["weights"]), references=s["references"])
    if res.init_digest != expected:
        raise RuntimeError(f"run {name}/{seed} did not start from a fresh student")
    report = dataclasses.replace(res.report, name=name)
    log.info("ablation %s seed %d: mIoU %.4f mAP %.4f", name, seed, report.miou, report.map)
    return AblationRun(name, seed, report, res.init_digest)


def run_ablation(matrix, train, val, teacher, coach, cfg: TrainConfig, seeds=(0, 1, 2),
                 weights: LossWeights | None = None, references=None, jobs: int = 1,
                 csv_path=None, runs_csv_path=None) -> AblationTable:
    """Run every config of ``matrix`` for every seed and tabulate val metrics.

    ``references`` is the ``(TgpdParams, ReferenceCache)`` pair from
    :func:`tcsdistill.trainer.prepare_references`; it is built once here
    when omitted so all runs see identical teacher/coach targets.
    """
    from ..trainer import prepare_references

    names = resolve(matrix)
    if references is None:
        references = prepare_references(teacher, coach, train, cfg, seed=0)
    _SHARED.update(cfg=cfg, train=train, val=val, teacher=teacher, coach=coach,
                   weights=weights or LossWeights(), references=references)
    tasks = [(n, int(s)) for n in names for s in seeds]
    try:
        if jobs > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                runs = list(pool.map(_run_one, *zip(*tasks)))
        else:
            runs = [_run_one(n, s) for n, s in tasks]
    finally:
        _SHARED.clear()
    for seed in seeds:
        digests = {r.init_sha for r in runs if r.seed == seed}
        if len(digests) != 1:
            raise RuntimeError(f"seed {seed}: configs started from different student weights")
    table = AblationTable(matrix if isinstance(matrix, str) else "custom", runs)
    if csv_path is not None:
        table.to_csv(csv_path)
    if runs_csv_path is not None:
        table.runs_csv(runs_csv_path)
    return table
