"""Shared pipeline steps: system matrices, datasets, checkpoints, reconstruction."""
from __future__ import annotations

import dataclasses

import numpy as np

from .deq import (
    DeqModel, TrainingData, deq_infer, e2e_infer, pretrain_lc, pretrain_rdn, train_deq,
    train_end2end, train_unrolled, unrolled_infer,
)
from .errors import ConfigError, FormatError
from .forward import discrepant_sm, emulate_batch, simulate_sm, upsampled_sm
from .io import ExperimentConfig, load_params, save_params
from .neural import LcConfig, ParamStore, RdnConfig, init_lc, init_rdn
from .phantoms import generate, vessel_dataset
from .solvers import admm_preset, admm_reconstruct, art_lambda, art_reconstruct

ADMM_METHODS = {"l1": "paper-l1", "tv": "paper-tv", "hyb": "paper-hyb"}
LEARNED = ("deq", "deq-noLc", "unrolled", "e2e")


def system_matrices(cfg: ExperimentConfig, seed=0, upsample=1):
    """(data-side SM, reconstruction SM); optionally both interpolated ``upsample`` times."""
    sm = simulate_sm(cfg.scanner, seed)
    smr = discrepant_sm(sm, cfg.solver.discrepancy)
    if upsample > 1:
        return upsampled_sm(sm, upsample), upsampled_sm(smr, upsample)
    return sm, smr


def phantom_set(cfg: ExperimentConfig, split, count, start=0):
    p = cfg.phantom
    if p.kind == "torus":
        return np.stack([generate(p)] * count)
    skip = {"kind", "grid", "seed"}
    extra = {f.name: getattr(p, f.name) for f in dataclasses.fields(p) if f.name not in skip}
    return vessel_dataset(split, count, grid=p.grid, start=start, **extra)


def emulate_set(sm, images, snr_db, seed):
    """Noisy measurements for a stack of images; returns (Y, noise_std)."""
    rng = np.random.default_rng(seed)
    X = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    return emulate_batch(sm.stacked, X, snr_db, rng)


# ---------------------------------------------------------------- checkpoints

def _arch(cfg):
    return dataclasses.asdict(cfg)


def save_model(path, kind, params: ParamStore, *, rdn=None, lc=None, mode=None, data_scale=None,
               n_it=None, log=None):
    meta = {"kind": kind}
    if rdn is not None:
        meta["rdn"] = _arch(rdn)
    if lc is not None:
        meta["lc"] = _arch(lc)
    for k, v in (("mode", mode), ("data_scale", data_scale), ("n_it", n_it)):
        if v is not None:
            meta[k] = v
    meta["log"] = list(log or [])
    save_params(path, params, meta)


def load_model(path):
    """Returns (kind, payload, meta). payload is a DeqModel, or (params, rdn) for e2e."""
    params, meta = load_params(path)
    if meta is None or "kind" not in meta:
        raise FormatError(f"checkpoint {path} has no sidecar metadata")
    kind = meta["kind"]
    rdn = RdnConfig(**meta["rdn"]) if "rdn" in meta else None
    lc = LcConfig(**meta["lc"]) if "lc" in meta else LcConfig()
    if kind in ("deq", "unrolled"):
        model = DeqModel(params, rdn, lc, meta.get("mode", "lc"), meta.get("data_scale", 1.0))
        return kind, model, meta
    if kind in ("e2e", "rdn"):
        return kind, (params, rdn), meta
    if kind == "lc":
        return kind, (params, lc), meta
    raise FormatError(f"unknown checkpoint kind {kind!r}")


# ---------------------------------------------------------------- reconstruction

def reconstruct(method, smr, Y, noise_std, snr_db, cfg: ExperimentConfig, model=None, n_it=None,
                backend=None):
    """Images (B, H, W) from measurements ``Y`` (B, 2M) with the named method."""
    Y = np.atleast_2d(Y)
    if method in ADMM_METHODS:
        if cfg.solver.method == method:
            acfg = cfg.solver.admm
        else:
            acfg = admm_preset(ADMM_METHODS[method], snr_db)
        out = admm_reconstruct(smr, Y, acfg, noise_std=noise_std, backend=backend)
    elif method == "art":
        lam = cfg.solver.art_lam if cfg.solver.method == "art" else art_lambda(snr_db)
        out = art_reconstruct(smr, Y, lam, cfg.solver.art_iters, noise_std=noise_std, backend=backend)
    elif method in ("deq", "deq-noLc"):
        if not isinstance(model, DeqModel):
            raise ConfigError(f"method {method!r} needs a DEQ checkpoint")
        want = "lc" if method == "deq" else "proj"
        if model.mode != want:
            model = DeqModel(model.params, model.rdn, model.lc, want, model.data_scale)
        out = deq_infer(smr, Y, model, cfg.solver.anderson, noise_std=noise_std, backend=backend)
    elif method == "unrolled":
        if not isinstance(model, DeqModel):
            raise ConfigError("method 'unrolled' needs an unrolled checkpoint")
        k = n_it or cfg.solver.unrolled_iters
        out = unrolled_infer(smr, Y, model, k, noise_std=noise_std, backend=backend)
    elif method == "e2e":
        if not isinstance(model, tuple):
            raise ConfigError("method 'e2e' needs an end-to-end checkpoint")
        params, rdn = model
        out = e2e_infer(smr, Y, params, rdn, backend=backend)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return np.asarray(out).reshape((len(Y),) + tuple(smr.grid))


# ---------------------------------------------------------------- training stages

def training_data(cfg: ExperimentConfig, sm, smr, split="train", count=None):
    n = count or (cfg.training.n_train if split == "train" else cfg.training.n_val)
    return TrainingData(sm, smr, phantom_set(cfg, split, n))


def run_pretrain_rdn(cfg: ExperimentConfig, images, seed=0, log=None):
    t = cfg.training
    tc = dataclasses.replace(t.stage(t.epochs_rdn), seed=seed)
    return pretrain_rdn(images, tc.sigma1, tc, t.rdn, log=log)


def run_pretrain_lc(cfg: ExperimentConfig, data: TrainingData, seed=0, log=None, data_scale=None):
    t = cfg.training
    tc = dataclasses.replace(t.stage(t.epochs_lc), seed=seed)
    kw = {} if data_scale is None else {"data_scale": data_scale}
    return pretrain_lc(data, tc.sigma2, tc.sigma3, tc.eps, tc, t.lc, log=log, **kw)


def initial_model(cfg: ExperimentConfig, rdn_params=None, lc_params=None, mode="lc", seed=0,
                  data_scale=None):
    """DeqModel from pretrained blocks; missing blocks get random init."""
    t = cfg.training
    params = rdn_params.copy() if rdn_params is not None else init_rdn(t.rdn, seed=seed)
    if mode == "lc":
        params = params.merged(lc_params if lc_params is not None else init_lc(t.lc, seed=seed + 1))
    kw = {} if data_scale is None else {"data_scale": data_scale}
    return DeqModel(params, t.rdn, t.lc, mode, **kw)


def run_train_deq(cfg: ExperimentConfig, data, model, val=None, seed=0, log=None):
    t = cfg.training
    tc = dataclasses.replace(t.stage(t.epochs_deq), seed=seed)
    return train_deq(data, model, tc, cfg.solver.anderson, val=val, log=log)


def run_train_unrolled(cfg: ExperimentConfig, data, model, val=None, seed=0, log=None):
    t = cfg.training
    tc = dataclasses.replace(t.stage(t.epochs_deq), seed=seed)
    return train_unrolled(data, model, cfg.solver.unrolled_iters, tc, val=val, log=log)


def run_train_e2e(cfg: ExperimentConfig, data, val=None, seed=0, log=None, init=None):
    t = cfg.training
    tc = dataclasses.replace(t.stage(t.epochs_deq), seed=seed)
    return train_end2end(data, tc, t.rdn, init=init, val=val, log=log)
