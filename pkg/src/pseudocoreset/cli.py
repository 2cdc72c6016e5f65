"""Command-line front end.

    bpc experts train   --train data.bpcd --out experts/
    bpc distill         --method fkl --train data.bpcd --expert-dir experts/ --ipc 10
    bpc sample          --sampler hmc --coreset out/coreset.bpcd
    bpc eval            --chain out/chain.bpct --test test.bpcd
    bpc synthetic       --out synth/
    bpc divergence      p.json q.json --mc 1000000

Every command accepts ``--config file.toml``, ``--preset``, ``--seed`` and
repeated ``--set section.key=value`` overrides. The output directory
defaults to ``$BPC_OUT`` or the working directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_toml, parse_overrides, preset_ipc, resolve
from .diffcore import ContractError, DimensionError
from .distill import DegenerateSegmentError, InsufficientDataError, distill
from .evalmetrics import MetricsReport, metrics, predictive
from .gaussapprox import (
    DecompositionError,
    GaussianApprox,
    gaussian_kl,
    gaussian_w2_squared,
    mc_kl_between,
    mc_w2_squared,
    write_reports,
)
from .models import Dataset, DatasetFormatError, NumericError, UnsupportedModelError, load_dataset, save_bpcd
from .samplers import asghmc_sample, hmc_sample
from .synthetic import SIZES, SyntheticSetup, run_synthetic, spearman, write_size_csv, write_step_csv
from .trajectories import (
    DivergedTrainingError,
    SegmentBoundsError,
    TrajectoryBuffer,
    TrajectoryFormatError,
    load_buffer,
    load_buffers,
    model_id,
    save_buffer,
    train_experts,
)

log = logging.getLogger("pseudocoreset")

# Stable exit codes, one per error class. Order matters: subclasses first.
EXIT_CODES = [
    (ConfigError, 3),
    (DatasetFormatError, 4),
    (TrajectoryFormatError, 4),
    (FileNotFoundError, 4),
    (DivergedTrainingError, 5),
    (NumericError, 5),
    (DecompositionError, 5),
    (FloatingPointError, 5),
    (UnsupportedModelError, 6),
    (SegmentBoundsError, 7),
    (DegenerateSegmentError, 7),
    (InsufficientDataError, 7),
    (DimensionError, 8),
    (ContractError, 8),
    (OSError, 4),
    (ValueError, 9),
]


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


# --- helpers ---------------------------------------------------------------

def _default_out() -> str:
    return os.environ.get("BPC_OUT", ".")


def _run_config(args, method=None) -> RunConfig:
    file_values = load_toml(args.config) if args.config else {}
    flags = parse_overrides(args.set)
    if args.preset:
        flags["preset"] = args.preset
    if args.seed is not None:
        flags["seed"] = args.seed
    flags["outdir"] = args.out or file_values.get("outdir") or _default_out()
    for name in ("train", "test", "expert_dir"):
        val = getattr(args, name, None)
        if val:
            flags[name] = val
    cfg = resolve(file_values, flags, method=method)
    # the run seed drives every random stream
    cfg = replace(cfg, distill=replace(cfg.distill, seed=cfg.seed))
    cfg.write_resolved()
    return cfg


def _spec_for(cfg: RunConfig, data: Dataset):
    model = cfg.model
    model = replace(model, input_dim=data.dim)
    if model.family != "gaussian-location" and model.num_classes == 0:
        if data.labels is None:
            raise DatasetFormatError("classifier families need labelled data")
        model = replace(model, num_classes=int(data.labels.max()) + 1)
    return model.build()


def _load(path, cfg: RunConfig, what: str) -> Dataset:
    if not path:
        raise ConfigError(f"no {what} dataset given")
    return load_dataset(path, has_labels=cfg.model.family != "gaussian-location")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands --------------------------------------------------------------

def cmd_experts_train(args) -> int:
    cfg = _run_config(args)
    data = _load(cfg.train, cfg, "training")
    spec = _spec_for(cfg, data)
    out = Path(cfg.expert_dir or cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    ex = cfg.experts
    bufs = train_experts(
        spec, data, ex.count, ex.epochs, ex.lr, cfg.seed,
        batch_size=ex.batch_size or None, init_scale=ex.init_scale, dataset_id=str(cfg.train),
    )
    for i, buf in enumerate(bufs):
        save_buffer(out / f"expert_{i:03d}.bpct", buf)
        for epoch, value in enumerate(buf.meta["losses"]):
            print(f"expert {i} epoch {epoch} loss {value:.6g}")
    return 0


def cmd_distill(args) -> int:
    cfg = _run_config(args, method=args.method)
    data = _load(cfg.train, cfg, "training")
    spec = _spec_for(cfg, data)
    if not cfg.expert_dir:
        raise ConfigError("distill needs --expert-dir")
    buffers = load_buffers(cfg.expert_dir)
    for i, b in enumerate(buffers):
        if b.param_dim != spec.param_dim:
            raise DimensionError(f"buffer {i} has dimension {b.param_dim}, model needs {spec.param_dim}")
    ipc = size = None
    if args.size:
        size = args.size
    elif spec.is_classifier:
        ipc = args.ipc or preset_ipc(cfg.preset)
    else:
        size = preset_ipc(cfg.preset)
    res = distill(spec, data, buffers, cfg.distill, size=size, ipc=ipc)
    out = Path(cfg.outdir)
    coreset = Dataset(res.coreset.features, res.coreset.labels)
    save_bpcd(out / "coreset.bpcd", coreset)
    write_reports(out / "divergences.csv", res.reports)
    with open(out / "objective.csv", "w") as fh:
        fh.write("step,objective\n")
        for k, v in enumerate(res.objectives, 1):
            fh.write(f"{k},{v!r}\n")
    manifest = {
        "version": __version__,
        "method": cfg.distill.method,
        "model": asdict(cfg.model) | {"input_dim": spec.input_dim, "num_classes": spec.num_classes},
        "size": len(res.coreset),
        "ipc": ipc,
        "distill": cfg.distill.to_dict(),
        "expert_buffers": [{"model_id": b.model_id, "sha256": b.digest()} for b in buffers],
    }
    _write_json(out / "coreset.json", manifest)
    print(f"wrote {len(res.coreset)} points to {out / 'coreset.bpcd'}")
    return 0


def cmd_sample(args) -> int:
    cfg = _run_config(args)
    coreset = _load(args.coreset, cfg, "coreset")
    spec = _spec_for(cfg, coreset)
    if args.num_classes:
        spec = replace(cfg.model, input_dim=coreset.dim, num_classes=args.num_classes).build()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    if args.sampler == "hmc":
        chain = hmc_sample(spec, coreset, cfg.hmc, rng)
        scfg = asdict(cfg.hmc)
    else:
        chain = asghmc_sample(spec, coreset, cfg.sghmc, rng)
        scfg = asdict(cfg.sghmc)
    out = Path(cfg.outdir)
    meta = {
        "sampler": args.sampler,
        "config": scfg,
        "seed": cfg.seed,
        "accepted": chain.accepted,
        "proposals": chain.proposals,
        "potentials": [float(p) for p in chain.potentials],
        "diagnostics": [list(d) for d in chain.diagnostics],
        "num_classes": spec.num_classes,
        "family": spec.family,
    }
    save_buffer(out / "chain.bpct", TrajectoryBuffer(model_id(spec), chain.samples, meta))
    print(f"{len(chain)} samples, acceptance {chain.acceptance_rate:.3f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    chain = load_buffer(args.chain)
    test = _load(cfg.test, cfg, "test")
    spec = _spec_for(cfg, test)
    nc = chain.meta.get("num_classes")
    if nc and nc != spec.num_classes:
        spec = replace(cfg.model, input_dim=test.dim, num_classes=nc).build()
    probs = predictive(spec, chain.snapshots, test.features)
    rep = metrics(probs, test.labels, bins=args.bins, samples=len(chain))
    out = Path(cfg.outdir)
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    with open(out / "metrics.csv", "w") as fh:
        fh.write(",".join(MetricsReport.CSV_FIELDS) + "\n")
        fh.write(rep.csv_row(args.method, args.ipc or "", chain.meta.get("sampler", ""), cfg.seed))
    print(rep.to_json())
    if rep.nll_clamped:
        log.warning("some true-class probabilities were zero; NLL used a floor")
    return 0


def cmd_synthetic(args) -> int:
    cfg = _run_config(args)
    sizes = tuple(int(s) for s in args.sizes.split(",")) if args.sizes else SIZES
    methods = tuple(args.methods.split(",")) if args.methods else ("rkl", "w", "fkl")
    setup = SyntheticSetup(steps=args.steps, sizes=sizes, methods=methods, seed=cfg.seed, workers=args.workers,
                           log_interval=args.log_interval)
    res = run_synthetic(setup)
    out = Path(cfg.outdir)
    write_step_csv(out / "synthetic_steps.csv", res)
    write_size_csv(out / "synthetic_sizes.csv", res)
    for m in methods:
        for kind in ("rKL", "fKL", "W2"):
            finals = [res.final(m, s, kind) for s in sizes]
            rho = spearman(sizes, finals) if len(sizes) > 1 else float("nan")
            print(f"{m:4s} {kind:4s} final by size {['%.4g' % v for v in finals]} spearman {rho:.3f}")
    return 0


def _read_gaussian(path) -> GaussianApprox:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    return GaussianApprox.from_dict(obj)


def cmd_divergence(args) -> int:
    p, q = _read_gaussian(args.p), _read_gaussian(args.q)
    result = {
        "kl_pq": gaussian_kl(p, q),
        "kl_qp": gaussian_kl(q, p),
        "w2_squared": gaussian_w2_squared(p, q),
    }
    if args.mc:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed or 0)))
        for key, est in (("kl_pq", mc_kl_between(p, q, args.mc, rng)),
                         ("kl_qp", mc_kl_between(q, p, args.mc, rng)),
                         ("w2_squared", mc_w2_squared(p, q, args.mc, rng))):
            result[f"{key}_mc"] = est.value
            result[f"{key}_mc_stderr"] = est.stderr
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "divergence.json").write_text(text + "\n")
    print(text)
    return 0


# --- parser ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--preset", choices=("ipc1", "ipc10", "ipc20"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default $BPC_OUT or .)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bpc", description="Bayesian pseudocoreset construction and evaluation")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("experts", help="expert trajectories")
    exs = ex.add_subparsers(dest="action", required=True)
    tr = exs.add_parser("train", help="train and save expert buffers")
    _common(tr)
    tr.add_argument("--train", help="training dataset (.bpcd or .csv)")
    tr.add_argument("--expert-dir", help="where to write buffers (default: --out)")
    tr.set_defaults(func=cmd_experts_train)

    d = sub.add_parser("distill", help="build a pseudocoreset")
    _common(d)
    d.add_argument("--method", choices=("rkl", "w", "fkl", "dc"), required=True)
    d.add_argument("--train")
    d.add_argument("--expert-dir")
    d.add_argument("--ipc", type=int)
    d.add_argument("--size", type=int)
    d.set_defaults(func=cmd_distill)

    s = sub.add_parser("sample", help="sample a posterior chain on a coreset")
    _common(s)
    s.add_argument("--sampler", choices=("hmc", "asghmc"), default="hmc")
    s.add_argument("--coreset", required=True)
    s.add_argument("--num-classes", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="predictive metrics of a chain on a test set")
    _common(e)
    e.add_argument("--chain", required=True)
    e.add_argument("--test")
    e.add_argument("--bins", type=int, default=15)
    e.add_argument("--method", default="")
    e.add_argument("--ipc", type=int)
    e.set_defaults(func=cmd_eval)

    y = sub.add_parser("synthetic", help="conjugate Gaussian benchmark")
    _common(y)
    y.add_argument("--steps", type=int, default=500)
    y.add_argument("--sizes", help="comma-separated coreset sizes")
    y.add_argument("--methods", help="comma-separated subset of rkl,w,fkl")
    y.add_argument("--workers", type=int, default=1)
    y.add_argument("--log-interval", type=int, default=10)
    y.set_defaults(func=cmd_synthetic)

    v = sub.add_parser("divergence", help="KL and W2^2 between two Gaussian JSON files")
    v.add_argument("p")
    v.add_argument("q")
    v.add_argument("--mc", type=int, default=0, help="Monte-Carlo cross-check sample count")
    v.add_argument("--seed", type=int)
    v.add_argument("--out")
    v.set_defaults(func=cmd_divergence)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to stable exit codes
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
