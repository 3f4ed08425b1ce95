"""Command-line driver.

Exit codes: 0 success, 1 usage, 2 configuration or file format, 3 numeric
failure. Error messages name the failing stage.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, pipeline
from .deq import JsonLog
from .errors import ConfigError, DeqMpiError, FormatError
from .forward import discrepant_sm
from .io import (
    ExperimentConfig, load_config, load_sm, read_container, save_sm, write_container, write_pgm,
)
from .metrics import ScoreReport

METHODS = ("l1", "tv", "hyb", "art", "deq", "deq-noLc", "unrolled", "e2e")


class UsageError(DeqMpiError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: usage error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _need(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise UsageError("missing required flag(s): " + ", ".join("--" + m for m in missing))


def _log_for(out):
    """JSON-lines log next to ``out`` (one record per epoch)."""
    path = Path(str(out) + ".log.jsonl")
    stream = path.open("w")
    return JsonLog(stream=stream, keep=True), stream


# ---------------------------------------------------------------- commands

def cmd_gen_sm(args):
    _need(args, "out")
    cfg = _config(args)
    sm, _ = pipeline.system_matrices(cfg, args.seed)
    save_sm(args.out, sm)
    print(f"system matrix {sm.stacked.shape[0] // 2} x {sm.n_voxels} (complex rows x voxels) -> {args.out}")


def cmd_gen_phantoms(args):
    _need(args, "out")
    cfg = _config(args)
    count = args.count or cfg.training.n_test
    images = pipeline.phantom_set(cfg, args.split, count, start=args.seed)
    write_container(args.out, {"images": images})
    print(f"{count} {cfg.phantom.kind} phantoms {images.shape[1:]} -> {args.out}")


def cmd_emulate(args):
    _need(args, "sm", "phantoms", "out")
    cfg = _config(args)
    sm = load_sm(args.sm)
    images = _images(args.phantoms)
    snr = cfg.training.train.snr_db if args.snr_db is None else args.snr_db
    Y, std = pipeline.emulate_set(sm, images, snr, args.seed)
    write_container(args.out, {"data": Y, "noise_std": std, "snr_db": np.array(float(snr)),
                               "images": images})
    print(f"{len(Y)} measurements at {snr:g} dB -> {args.out}")


def _images(path):
    c = read_container(path)
    if "images" not in c:
        raise FormatError(f"{path} has no 'images' entry")
    return np.array(c["images"], dtype=np.float64)


def _model(args, method):
    if method not in pipeline.LEARNED:
        return None, None
    if args.model is None:
        raise UsageError(f"--method {method} needs --model")
    kind, model, meta = pipeline.load_model(args.model)
    expected = {"deq": "deq", "deq-noLc": "deq", "unrolled": "unrolled", "e2e": "e2e"}[method]
    if kind != expected:
        raise ConfigError(f"checkpoint {args.model} holds a {kind!r} model, --method {method} needs {expected!r}")
    return model, meta


def cmd_recon(args):
    _need(args, "sm", "meas", "method", "out")
    cfg = _config(args)
    sm = load_sm(args.sm)
    smr = sm if args.as_is else discrepant_sm(sm, cfg.solver.discrepancy)
    meas = read_container(args.meas)
    if "data" not in meas or "noise_std" not in meas:
        raise FormatError(f"{args.meas} needs 'data' and 'noise_std' entries")
    snr = float(meas["snr_db"]) if "snr_db" in meas else cfg.training.train.snr_db
    model, meta = _model(args, args.method)
    n_it = args.n_it or (meta or {}).get("n_it")
    out = pipeline.reconstruct(args.method, smr, meas["data"], meas["noise_std"], snr, cfg, model,
                               n_it=n_it)
    entries = {"images": out}
    if "images" in meas:
        report = ScoreReport.of(out, meas["images"])
        entries.update(psnr=report.psnr_db, ssim=report.ssim)
        _write_scores(str(args.out) + ".scores.tsv", [(args.method, snr, report)])
        print(_table([(args.method, snr, report)]))
    write_container(args.out, entries)
    if args.pgm:
        for i, img in enumerate(out[: args.pgm_count]):
            write_pgm(f"{args.pgm}_{i:03d}.pgm", img)


def _train_setup(args):
    _need(args, "sm", "out")
    cfg = _config(args)
    sm = load_sm(args.sm)
    smr = discrepant_sm(sm, cfg.solver.discrepancy)
    data = pipeline.training_data(cfg, sm, smr, "train")
    val = pipeline.training_data(cfg, sm, smr, "val")
    return cfg, data, val


def _load_block(path, kind):
    if path is None:
        return None
    k, payload, _ = pipeline.load_model(path)
    if k != kind:
        raise ConfigError(f"{path} holds a {k!r} checkpoint, expected {kind!r}")
    return payload[0]


def cmd_pretrain_rdn(args):
    _need(args, "out")
    cfg = _config(args)
    images = pipeline.phantom_set(cfg, "train", cfg.training.n_train)
    log, stream = _log_for(args.out)
    with stream:
        params = pipeline.run_pretrain_rdn(cfg, images, args.seed, log)
    pipeline.save_model(args.out, "rdn", params, rdn=cfg.training.rdn, log=log.records)


def cmd_pretrain_lc(args):
    cfg, data, _ = _train_setup(args)
    log, stream = _log_for(args.out)
    with stream:
        params = pipeline.run_pretrain_lc(cfg, data, args.seed, log)
    pipeline.save_model(args.out, "lc", params, lc=cfg.training.lc, log=log.records)


def cmd_train_deq(args):
    cfg, data, val = _train_setup(args)
    mode = "proj" if args.no_lc else "lc"
    model = pipeline.initial_model(cfg, _load_block(args.init_rdn, "rdn"),
                                   _load_block(args.init_lc, "lc"), mode, args.seed)
    log, stream = _log_for(args.out)
    with stream:
        model = pipeline.run_train_deq(cfg, data, model, val, args.seed, log)
    pipeline.save_model(args.out, "deq", model.params, rdn=model.rdn, lc=model.lc, mode=model.mode,
                        data_scale=model.data_scale, log=log.records)


def cmd_train_unrolled(args):
    cfg, data, val = _train_setup(args)
    # the unrolled baseline keeps the unlearned ball projection as its data step
    model = pipeline.initial_model(cfg, _load_block(args.init_rdn, "rdn"), None, "proj", args.seed)
    log, stream = _log_for(args.out)
    with stream:
        model = pipeline.run_train_unrolled(cfg, data, model, val, args.seed, log)
    pipeline.save_model(args.out, "unrolled", model.params, rdn=model.rdn, lc=model.lc,
                        mode=model.mode, data_scale=model.data_scale,
                        n_it=cfg.solver.unrolled_iters, log=log.records)


def cmd_train_e2e(args):
    cfg, data, val = _train_setup(args)
    log, stream = _log_for(args.out)
    with stream:
        params = pipeline.run_train_e2e(cfg, data, val, args.seed, log)
    pipeline.save_model(args.out, "e2e", params, rdn=cfg.training.rdn, log=log.records)


def cmd_eval(args):
    _need(args, "recon", "ref")
    recon = _images(args.recon)
    ref = _images(args.ref)
    report = ScoreReport.of(recon, ref)
    rows = [(args.label, float("nan"), report)]
    print(_table(rows))
    if args.out:
        _write_scores(args.out, rows)
        Path(str(args.out) + ".records.json").write_text(json.dumps(report.records(), indent=1) + "\n")


def cmd_gradcheck(args):
    report, skipped = gradcheck.run_all(args.count or 20, args.seed)
    for name, err in report.items():
        limit = gradcheck.THRESHOLDS.get(name, gradcheck.DEFAULT_THRESHOLD)
        print(f"{name:14s} max_rel_err={err:.3e}  limit={limit:.0e}  {'ok' if err < limit else 'FAIL'}")
    if skipped:
        print(f"implicit toys skipped (vanishing gradient): {skipped}")
    worst = max(report.values())
    print(f"max relative error {worst:.3e}")
    if not gradcheck.passed(report):
        raise GradcheckFailure("finite-difference mismatch above threshold")


class GradcheckFailure(DeqMpiError):
    exit_code = 3


def cmd_sweep(args):
    _need(args, "sm")
    cfg = _config(args)
    sm = load_sm(args.sm)
    smr = discrepant_sm(sm, cfg.solver.discrepancy)
    count = args.count or cfg.training.n_test
    images = pipeline.phantom_set(cfg, "test", count)
    models = {}
    for method in args.methods:
        if method in pipeline.LEARNED:
            path = Path(args.models or ".") / f"{method}.mpir"
            if not path.exists():
                print(f"skipping {method}: no checkpoint at {path}", file=sys.stderr)
                continue
            models[method] = pipeline.load_model(path)[1]
        else:
            models[method] = None
    rows = []
    for snr in args.snr_db_list:
        Y, std = pipeline.emulate_set(sm, images, snr, args.seed)
        for method, model in models.items():
            out = pipeline.reconstruct(method, smr, Y, std, snr, cfg, model)
            rows.append((method, snr, ScoreReport.of(out, images)))
    print(_table(rows))
    if args.out:
        _write_scores(args.out, rows)


def _table(rows):
    lines = ["method\tsnr_db\tpsnr_mean\tpsnr_std\tssim_mean\tssim_std"]
    for method, snr, rep in rows:
        s = rep.summary()
        lines.append(f"{method}\t{snr:g}\t{s['psnr_mean']:.2f}\t{s['psnr_std']:.2f}"
                     f"\t{s['ssim_mean']:.4f}\t{s['ssim_std']:.4f}")
    return "\n".join(lines)


def _write_scores(path, rows):
    Path(path).write_text(_table(rows) + "\n")


# ---------------------------------------------------------------- parser

COMMANDS = {
    "gen-sm": cmd_gen_sm,
    "gen-phantoms": cmd_gen_phantoms,
    "emulate": cmd_emulate,
    "recon": cmd_recon,
    "pretrain-rdn": cmd_pretrain_rdn,
    "pretrain-lc": cmd_pretrain_lc,
    "train-deq": cmd_train_deq,
    "train-unrolled": cmd_train_unrolled,
    "train-e2e": cmd_train_e2e,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def build_parser():
    p = _Parser(prog="deqmpi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON config file or preset name (paper-l1, paper-deq, ...)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out")
        return s

    add("gen-sm", "simulate the system matrix")
    s = add("gen-phantoms", "generate a phantom set")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--count", type=int)
    s = add("emulate", "noisy measurements from phantoms")
    s.add_argument("--sm")
    s.add_argument("--phantoms")
    s.add_argument("--snr-db", type=float)
    s = add("recon", "reconstruct a measurement container")
    s.add_argument("--sm")
    s.add_argument("--meas")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--model", help="checkpoint for learned methods")
    s.add_argument("--n-it", type=int, help="iterations for the unrolled model")
    s.add_argument("--as-is", action="store_true", help="use the SM without the calibration mismatch")
    s.add_argument("--pgm", help="prefix for graymap previews")
    s.add_argument("--pgm-count", type=int, default=4)
    for name in ("pretrain-rdn", "pretrain-lc", "train-deq", "train-unrolled", "train-e2e"):
        s = add(name, f"{name.replace('-', ' ')} stage")
        s.add_argument("--sm")
        if name in ("train-deq", "train-unrolled"):
            s.add_argument("--init-rdn")
        if name == "train-deq":
            s.add_argument("--init-lc")
            s.add_argument("--no-lc", action="store_true", help="train the LC-ablated variant")
    s = add("eval", "score reconstructions against references")
    s.add_argument("--recon")
    s.add_argument("--ref")
    s.add_argument("--label", default="recon")
    s = add("gradcheck", "finite-difference checks of all gradients")
    s.add_argument("--count", type=int)
    s = add("sweep", "methods x SNR table on the synthetic test set")
    s.add_argument("--sm")
    s.add_argument("--models", help="directory holding <method>.mpir checkpoints")
    s.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS)
    s.add_argument("--snr-db-list", nargs="+", type=float, default=[15.0, 25.0, 35.0])
    s.add_argument("--count", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = args.command
    try:
        COMMANDS[stage](args)
    except DeqMpiError as exc:
        print(f"deqmpi {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"deqmpi {stage}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"deqmpi {stage}: numeric error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
