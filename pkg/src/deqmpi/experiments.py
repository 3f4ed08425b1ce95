"""Reduced-scale study: trains every model once and scores it on the test set.

Run with ``python -m deqmpi.experiments --out runs``. Checkpoints are cached
in the output directory, so an interrupted run resumes where it stopped.
The summary lands in ``results.json``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .deq import DeqModel, JsonLog, TrainingData, deq_infer, train_deq
from .forward import upsampled_sm
from .io import ExperimentConfig, preset
from .metrics import ScoreReport
from .phantoms import PhantomSpec, generate, torus_hole_index, vessel_dataset

SNR_DB = 35.0
TORUS_SNR_DB = 15.0
# vessel widths and blur in voxels, doubled for the half-size voxels of the upsampled grid
FINE_VESSELS = dict(width_px=(2.0, 6.0), blur_sigma=1.0)


def study_config(epochs_deq=2.0) -> ExperimentConfig:
    cfg = preset("paper-deq", SNR_DB)
    t = cfg.training
    train = dataclasses.replace(t.train, batch_size=8)
    training = dataclasses.replace(t, train=train, epochs_rdn=2.5, epochs_lc=10.0, epochs_deq=epochs_deq)
    return dataclasses.replace(cfg, training=training).validate()


class Study:
    def __init__(self, out, cfg: ExperimentConfig, fine_samples=1024, verbose=True):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.fine_samples = fine_samples
        self.verbose = verbose
        self.timings = {}
        self.logs = {}
        t = cfg.training
        self.sm, self.smr = pipeline.system_matrices(cfg)
        self.train = pipeline.training_data(cfg, self.sm, self.smr, "train", t.n_train)
        self.val = pipeline.training_data(cfg, self.sm, self.smr, "val", t.n_val)
        self.test_images = pipeline.phantom_set(cfg, "test", t.n_test)

    def say(self, *msg):
        if self.verbose:
            print(*msg, flush=True)

    def _cached(self, name, build):
        """Load ``name`` from the output directory, or build, time and save it first."""
        path = self.out / f"{name}.mpir"
        clock = self.out / "timings.json"

        def timings():
            return json.loads(clock.read_text()) if clock.exists() else {}

        if not path.exists():
            self.say(f"[{name}] training")
            log = JsonLog(keep=True)
            t0 = time.perf_counter()
            kind, params, meta = build(log)
            secs = time.perf_counter() - t0
            pipeline.save_model(path, kind, params, log=log.records, **meta)
            clock.write_text(json.dumps(dict(timings(), **{name: secs}), indent=1, sort_keys=True) + "\n")
            self.say(f"[{name}] {secs:.0f} s")
        _, payload, meta = pipeline.load_model(path)
        self.timings[name] = timings().get(name)
        self.logs[name] = meta.get("log", [])
        return payload

    # ------------------------------------------------------------ models

    def rdn(self):
        def build(log):
            p = pipeline.run_pretrain_rdn(self.cfg, self.train.images, log=log)
            return "rdn", p, dict(rdn=self.cfg.training.rdn)
        return self._cached("rdn", build)[0]

    def lc(self):
        def build(log):
            p = pipeline.run_pretrain_lc(self.cfg, self.train, log=log)
            return "lc", p, dict(lc=self.cfg.training.lc)
        return self._cached("lc", build)[0]

    def _model_meta(self, m: DeqModel):
        return dict(rdn=m.rdn, lc=m.lc, mode=m.mode, data_scale=m.data_scale)

    def deq(self, name="deq", pretrained=True, mode="lc"):
        def build(log):
            rdn = self.rdn() if pretrained else None
            lc = self.lc() if pretrained and mode == "lc" else None
            m0 = pipeline.initial_model(self.cfg, rdn, lc, mode=mode)
            m = pipeline.run_train_deq(self.cfg, self.train, m0, val=self.val, log=log)
            return "deq", m.params, self._model_meta(m)
        return self._cached(name, build)

    def unrolled(self):
        def build(log):
            m0 = pipeline.initial_model(self.cfg, self.rdn(), mode="proj")
            m = pipeline.run_train_unrolled(self.cfg, self.train, m0, val=self.val, log=log)
            return "unrolled", m.params, dict(self._model_meta(m), n_it=self.cfg.solver.unrolled_iters)
        return self._cached("unrolled", build)

    def e2e(self):
        def build(log):
            p = pipeline.run_train_e2e(self.cfg, self.train, val=self.val, log=log, init=self.rdn())
            return "e2e", p, dict(rdn=self.cfg.training.rdn)
        return self._cached("e2e", build)

    def fine_sms(self):
        return upsampled_sm(self.sm, 2), upsampled_sm(self.smr, 2)

    def torus_model(self):
        """The DEQ fine-tuned on upsampled-grid vessels at the torus SNR."""
        def build(log):
            smu, smru = self.fine_sms()
            kw = dict(FINE_VESSELS, grid=tuple(smu.grid))
            data = TrainingData(smu, smru, vessel_dataset("train", self.fine_samples, **kw))
            val = TrainingData(smu, smru, vessel_dataset("val", 16, **kw))
            tc = dataclasses.replace(self.cfg.training.train, epochs=1.0, snr_db=TORUS_SNR_DB)
            m = train_deq(data, self.deq(), tc, self.cfg.solver.anderson, val=val, log=log)
            return "deq", m.params, self._model_meta(m)
        return self._cached("deq-torus", build)

    # ------------------------------------------------------------ evaluation

    def score(self, method, model=None, n_it=None):
        Y, std = pipeline.emulate_set(self.sm, self.test_images, SNR_DB, seed=12345)
        out = pipeline.reconstruct(method, self.smr, Y, std, SNR_DB, self.cfg, model, n_it)
        return ScoreReport.of(out, self.test_images).summary()

    def convergence(self, model: DeqModel):
        Y, std = pipeline.emulate_set(self.sm, self.test_images, SNR_DB, seed=12345)
        _, res = deq_infer(self.smr, Y, model, self.cfg.solver.anderson, noise_std=std,
                           return_result=True)
        return dict(fraction=float(res.converged.mean()), median_residual=float(np.median(res.residual)),
                    max_residual=float(np.max(res.residual)), mean_iters=float(np.mean(res.iters)))

    def torus(self, model: DeqModel, seeds=(0, 1, 2)):
        smu, smru = self.fine_sms()
        spec = PhantomSpec(kind="torus", grid=tuple(smu.grid), voxel_mm=self.cfg.scanner.voxel_mm / 2)
        img = generate(spec)
        hole = torus_hole_index(spec)
        ratios = {}
        for method in ("deq", "l1", "tv"):
            r = []
            for s in seeds:
                Y, std = pipeline.emulate_set(smu, img[None], TORUS_SNR_DB, seed=s)
                x = pipeline.reconstruct(method, smru, Y, std, TORUS_SNR_DB, self.cfg, model)[0]
                r.append(float(x[hole] / x.max()))
            ratios[method] = r
        return ratios

    def run(self):
        res = {"config": self.cfg.to_dict(), "snr_db": SNR_DB, "n_test": len(self.test_images)}
        self.rdn()
        self.lc()
        deq = self.deq()
        nolc = self.deq("deq-noLc", mode="proj")
        self.deq("deq-random", pretrained=False)
        unr = self.unrolled()
        e2e = self.e2e()
        tor = self.torus_model()
        scores = {m: self.score(m) for m in ("l1", "tv", "hyb", "art")}
        scores["deq"] = self.score("deq", deq)
        scores["deq-noLc"] = self.score("deq-noLc", nolc)
        scores["unrolled5"] = self.score("unrolled", unr, 5)
        scores["unrolled25"] = self.score("unrolled", unr, 25)
        scores["e2e"] = self.score("e2e", e2e)
        res["test"] = scores
        res["convergence"] = self.convergence(deq)
        res["val_psnr"] = {k: [r.get("val_psnr") for r in self.logs[k] if "val_psnr" in r]
                           for k in ("deq", "deq-random")}
        res["torus_hole_ratio"] = self.torus(tor)
        res["train_seconds"] = dict(self.timings)
        (self.out / "results.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
        return res


def main(argv=None):
    p = argparse.ArgumentParser(description="reduced-scale training and evaluation study")
    p.add_argument("--out", default="runs")
    p.add_argument("--epochs", type=float, default=2.0, help="epochs for each DEQ-style training")
    p.add_argument("--fine-samples", type=int, default=1024)
    args = p.parse_args(argv)
    res = Study(args.out, study_config(args.epochs), args.fine_samples).run()
    print(json.dumps(res["test"], indent=1))


if __name__ == "__main__":
    main()
