"""``tcsdistill`` command line: gen, pretrain, distill, eval, ablate, bench.

Configuration is one flat file of ``section.key = value`` lines (sections
gen, pretrain, distill, weights, eval, ablate, bench plus the global keys
``seed`` and ``out_dir``); ``--set`` overrides single keys.  Failures exit
nonzero with a single ``error: kind=<Kind> msg=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .config import ConfigError, apply_pairs, parse_pairs, to_text
from .container import ContainerError, file_crc
from .scenegen import GenConfig

OUT_ENV = "TCSDISTILL_OUT"
CONFIG_ECHO = "config.txt"
MANIFEST = "manifest.txt"


class CliError(Exception):
    """User-facing failure with a short machine-readable kind."""

    def __init__(self, kind: str, msg: str):
        super().__init__(msg)
        self.kind = kind


@dataclass
class EvalConfig:
    batch_size: int = 16
    threshold: float = 0.5
    fps: bool = False

    def validate(self) -> None:
        if self.batch_size <= 0 or not 0 < self.threshold < 1:
            raise ValueError("eval.batch_size must be positive and eval.threshold in (0, 1)")


@dataclass
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    calib_seed: int = 0

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("ablate.seeds must not be empty")


@dataclass
class BenchConfig:
    iters: int = 30
    warmup: int = 3
    batch_size: int = 8
    runs: int = 3

    def validate(self) -> None:
        if self.iters < 30:
            raise ValueError("bench.iters must be at least 30")
        if self.warmup < 0 or self.batch_size <= 0 or self.runs <= 0:
            raise ValueError("bench.warmup must be >= 0; batch_size and runs positive")


def _train_sections():
    from .trainer import LossWeights, TrainConfig
    return {"pretrain": TrainConfig(), "distill": TrainConfig(epochs=10), "weights": LossWeights()}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    sections: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self) -> str:
        text = f"seed = {self.seed}\nout_dir = {self.out_dir}\n"
        return text + "".join(to_text(obj, name) for name, obj in self.sections.items())


def default_config() -> RunConfig:
    sections = {"gen": GenConfig(), **_train_sections(), "eval": EvalConfig(),
                "ablate": AblateConfig(), "bench": BenchConfig()}
    return RunConfig(sections=sections)


def load_config(text: str = "", overrides=()) -> RunConfig:
    """Parse config text plus ``key=value`` overrides; unknown keys are rejected."""
    cfg = default_config()
    pairs = parse_pairs(text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    grouped: dict[str, dict[str, str]] = {}
    for key, value in pairs:
        if key == "seed":
            try:
                cfg.seed = int(value)
            except ValueError:
                raise ConfigError(f"seed: cannot parse {value!r} as int") from None
            continue
        if key == "out_dir":
            cfg.out_dir = value
            continue
        sec, dot, name = key.partition(".")
        if not dot or sec not in cfg.sections:
            raise ConfigError(f"unknown key {key}")
        grouped.setdefault(sec, {})[name] = value
    for sec, kv in grouped.items():
        try:
            cfg.sections[sec] = apply_pairs(cfg.sections[sec], kv, sec)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{sec}: {e}") from None
    return cfg


# ---------------------------------------------------------------- helpers

def _out_dir(args, cfg: RunConfig) -> Path:
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(args.out or cfg.out_dir)


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CliError("OutputExists", f"{path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise CliError("MissingInput", f"{what} not found: {path}")
    return path


def write_manifest(out: Path, cfg: RunConfig) -> None:
    (out / CONFIG_ECHO).write_text(cfg.echo())
    lines = []
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != MANIFEST:
            lines.append(f"{p.name} {p.stat().st_size} {file_crc(p):08x}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def _load_data(data_dir: Path, split: str):
    from .scenegen import load_dataset
    return load_dataset(_need(data_dir / f"{split}.tcsd", f"{split} dataset"))


def _load_ckpt(path: Path, role: str):
    from .nets import load_params
    p = load_params(_need(path, f"{role} checkpoint"))
    if p.role != role:
        raise CliError("RoleMismatch", f"{path} holds {p.role} parameters, expected {role}")
    return p


# ---------------------------------------------------------------- commands

def cmd_gen(args, cfg: RunConfig) -> Path:
    from .scenegen import generate_dataset, save_dataset
    out = _prepare_out(_out_dir(args, cfg), args.force)
    g = cfg.gen
    for split, n in (("train", g.n_train), ("val", g.n_val)):
        save_dataset(generate_dataset(g, cfg.seed, split, n), out / f"{split}.tcsd")
    write_manifest(out, cfg)
    return out


def cmd_pretrain(args, cfg: RunConfig) -> Path:
    from .trainer import pretrain_teacher_coach
    data = Path(args.data)
    train, val = _load_data(data, "train"), _load_data(data, "val")
    out = _prepare_out(_out_dir(args, cfg), args.force)
    tc = dataclasses.replace(cfg.pretrain, seed=cfg.seed)
    res = pretrain_teacher_coach(tc, train, val, with_coach=not args.no_coach, ckpt_dir=out)
    for role, mlog in res.logs.items():
        mlog.to_csv(out / f"log_{role}.csv")
    write_manifest(out, cfg)
    return out


def _references(cfg: RunConfig, teacher, coach, train, dc_cfg):
    from .trainer import prepare_references
    return prepare_references(teacher, coach, train, dc_cfg, seed=cfg.ablate.calib_seed)


def cmd_distill(args, cfg: RunConfig) -> Path:
    from .nets import save_params
    from .trainer import distill_student, train_baseline
    data, refs = Path(args.data), Path(args.refs) if args.refs else None
    train, val = _load_data(data, "train"), _load_data(data, "val")
    dcfg = dataclasses.replace(cfg.distill, seed=cfg.seed, two_stage=cfg.distill.two_stage or args.two_stage)
    if args.baseline:
        out = _prepare_out(_out_dir(args, cfg), args.force)
        res = train_baseline(dcfg, train, val)
    else:
        if refs is None:
            raise CliError("MissingInput", "--refs is required unless --baseline is given")
        teacher = _load_ckpt(refs / "teacher.ckpt", "teacher")
        coach = None if dcfg.two_stage else _load_ckpt(refs / "coach.ckpt", "coach")
        out = _prepare_out(_out_dir(args, cfg), args.force)
        res = distill_student(dcfg, train, val, teacher, coach, cfg.weights,
                              references=_references(cfg, teacher, coach, train, dcfg))
    save_params(res.student, out / "student.ckpt")
    res.log.to_csv(out / "log_student.csv")
    write_manifest(out, cfg)
    return out


def cmd_eval(args, cfg: RunConfig) -> Path:
    from .evalkit import MetricAccumulator, bench_fps, reports_to_csv
    from .nets import forward, load_params
    from .trainer import make_batch
    val = _load_data(Path(args.data), "val")
    out = _prepare_out(_out_dir(args, cfg), args.force)
    reports = []
    for ckpt in args.ckpt:
        p = load_params(_need(Path(ckpt), "checkpoint"))
        acc = MetricAccumulator(prob_threshold=cfg.eval.threshold)
        bs = cfg.eval.batch_size
        for i in range(0, len(val), bs):
            batch = make_batch(val, range(i, min(i + bs, len(val))))
            acc.update(forward(p, batch).logits.data, batch["gt_sem"], batch["gt_inst"])
        fps = None
        if cfg.eval.fps:
            fps = bench_fps(p, make_batch(val, range(min(cfg.bench.batch_size, len(val)))),
                            cfg.bench.iters, cfg.bench.warmup).fps
        reports.append(acc.report(name=p.role, fps=fps, seed=cfg.seed))
    reports_to_csv(reports, out / "metrics.csv")
    write_manifest(out, cfg)
    return out


def cmd_ablate(args, cfg: RunConfig) -> Path:
    from .evalkit.ablation import CONFIGS, resolve, run_ablation
    names = resolve(args.matrix)
    data, refs = Path(args.data), Path(args.refs)
    train, val = _load_data(data, "train"), _load_data(data, "val")
    teacher = _load_ckpt(refs / "teacher.ckpt", "teacher")
    needs_coach = any(not CONFIGS[n].two_stage for n in names)
    coach = _load_ckpt(refs / "coach.ckpt", "coach") if needs_coach else None
    out = _prepare_out(_out_dir(args, cfg), args.force)
    dcfg = dataclasses.replace(cfg.distill, seed=cfg.seed)
    seeds = tuple(cfg.seed + s for s in cfg.ablate.seeds)
    run_ablation(args.matrix, train, val, teacher, coach, dcfg, seeds=seeds, weights=cfg.weights,
                 references=_references(cfg, teacher, coach, train, dcfg), jobs=args.jobs,
                 csv_path=out / f"ablation_{args.matrix}.csv",
                 runs_csv_path=out / f"ablation_{args.matrix}_runs.csv")
    write_manifest(out, cfg)
    return out


def cmd_bench(args, cfg: RunConfig) -> Path:
    import csv

    from .evalkit import bench_fps
    from .nets import init_params, load_params, param_count
    from .trainer import make_batch
    val = _load_data(Path(args.data), "val")
    out = _prepare_out(_out_dir(args, cfg), args.force)
    models = [load_params(_need(Path(c), "checkpoint")) for c in args.ckpt] or \
        [init_params(r, cfg.seed) for r in ("student", "coach", "teacher")]
    b = cfg.bench
    batch = make_batch(val, range(min(b.batch_size, len(val))))
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["role", "run", "params", "fps"])
        for run in range(b.runs):
            for p in models:
                res = bench_fps(p, batch, b.iters, b.warmup)
                w.writerow([p.role, run, param_count(p), f"{res.fps:.2f}"])
    write_manifest(out, cfg)
    return out


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "distill": cmd_distill, "eval": cmd_eval,
            "ablate": cmd_ablate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcsdistill", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    common.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    common.add_argument("--out", help=f"output directory (env {OUT_ENV} takes precedence)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate train/val scene containers")
    p = sub.add_parser("pretrain", parents=[common], help="train and freeze teacher and coach")
    p.add_argument("--data", required=True)
    p.add_argument("--no-coach", action="store_true", help="teacher only (two-stage setup)")
    p = sub.add_parser("distill", parents=[common], help="train a student against frozen references")
    p.add_argument("--data", required=True)
    p.add_argument("--refs", help="directory with teacher.ckpt and coach.ckpt")
    p.add_argument("--baseline", action="store_true", help="supervised loss only, no references")
    p.add_argument("--two-stage", action="store_true", help="teacher only, no coach")
    p = sub.add_parser("eval", parents=[common], help="metrics CSV for one or more checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", required=True)
    p = sub.add_parser("ablate", parents=[common], help="run an ablation matrix")
    p.add_argument("matrix", help="table3, table4, beta, gamma or a single config name")
    p.add_argument("--data", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("bench", parents=[common], help="forward throughput per model")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", default=[])
    return ap


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(_need(Path(args.config), "config")).read_text() if args.config else ""
        cfg = load_config(text, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        out = COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"error: kind={e.kind} msg={_one_line(e)}", file=sys.stderr)
        return 2
    except (ConfigError, ContainerError, KeyError, ValueError, RuntimeError, OSError) as e:
        print(f"error: kind={type(e).__name__} msg={_one_line(e)}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
