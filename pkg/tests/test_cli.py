import json

import numpy as np
import pytest

from deqmpi.cli import main
from deqmpi.forward import SystemMatrix
from deqmpi.io import read_container, save_sm

SMALL = {
    "scanner": {"grid": [8, 8], "n_angles": 6, "harmonics": [2, 5]},
    "phantom": {"grid": [8, 8]},
    "training": {"n_train": 16, "n_val": 4, "n_test": 4, "epochs_rdn": 1, "epochs_lc": 1,
                 "epochs_deq": 0.5, "rdn": {"n_res": 1, "f_r": 4, "n_conv": 2, "f_s": 4},
                 "lc": {"n_lc": 1, "f_lc": 4, "kernel": 3}, "train": {"batch_size": 4}},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


@pytest.fixture
def identity_fixture(tmp_path):
    """Identity system on an 8x8 grid with discrepancy switched off."""
    n = 64
    sm = SystemMatrix.from_matrix(np.vstack([np.eye(n), np.zeros((n, n))]), (8, 8))
    save_sm(tmp_path / "id.mpir", sm)
    cfg = dict(SMALL, solver={"method": "l1", "discrepancy": 1})
    path = tmp_path / "id.json"
    path.write_text(json.dumps(cfg))
    return str(tmp_path / "id.mpir"), str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_phantoms_deterministic(tmp_path, cfg_file):
    a, b = tmp_path / "a.mpir", tmp_path / "b.mpir"
    assert run("gen-phantoms", "--config", cfg_file, "--seed", 7, "--out", a) == 0
    assert run("gen-phantoms", "--config", cfg_file, "--seed", 7, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_container(a)["images"].shape == (4, 8, 8)


def test_recon_l1_identity_system(tmp_path, identity_fixture, capsys):
    sm, cfg = identity_fixture
    ph, meas, rec = tmp_path / "p.mpir", tmp_path / "m.mpir", tmp_path / "r.mpir"
    assert run("gen-phantoms", "--config", cfg, "--count", 3, "--out", ph) == 0
    assert run("emulate", "--config", cfg, "--sm", sm, "--phantoms", ph, "--snr-db", 60, "--out", meas) == 0
    assert run("recon", "--config", cfg, "--sm", sm, "--meas", meas, "--method", "l1", "--out", rec,
               "--pgm", tmp_path / "prev") == 0
    out = read_container(rec)
    assert np.all(out["psnr"] > 40)
    assert (tmp_path / "prev_000.pgm").exists()
    assert "psnr_mean" in capsys.readouterr().out


def test_pipeline_commands(tmp_path, cfg_file, capsys):
    sm = tmp_path / "sm.mpir"
    assert run("gen-sm", "--config", cfg_file, "--out", sm) == 0
    rdn, lc = tmp_path / "rdn.mpir", tmp_path / "lc.mpir"
    assert run("pretrain-rdn", "--config", cfg_file, "--out", rdn) == 0
    assert run("pretrain-lc", "--config", cfg_file, "--sm", sm, "--out", lc) == 0
    models = tmp_path / "models"
    models.mkdir()
    assert run("train-deq", "--config", cfg_file, "--sm", sm, "--init-rdn", rdn, "--init-lc", lc,
               "--out", models / "deq.mpir") == 0
    assert run("train-unrolled", "--config", cfg_file, "--sm", sm, "--init-rdn", rdn,
               "--out", models / "unrolled.mpir") == 0
    assert run("train-e2e", "--config", cfg_file, "--sm", sm, "--out", models / "e2e.mpir") == 0
    log = (models / "deq.mpir.log.jsonl").read_text().splitlines()
    assert json.loads(log[-1])["stage"] == "train-deq"

    ph, meas = tmp_path / "p.mpir", tmp_path / "m.mpir"
    assert run("gen-phantoms", "--config", cfg_file, "--count", 2, "--out", ph) == 0
    assert run("emulate", "--config", cfg_file, "--sm", sm, "--phantoms", ph, "--out", meas) == 0
    for method in ("deq", "deq-noLc", "unrolled", "e2e", "tv", "art"):
        model = [] if method in ("tv", "art") else ["--model", models / f"{method.split('-')[0]}.mpir"]
        rec = tmp_path / f"{method}.mpir"
        assert run("recon", "--config", cfg_file, "--sm", sm, "--meas", meas, "--method", method,
                   "--out", rec, *model) == 0, method
        assert read_container(rec)["images"].shape == (2, 8, 8)
    assert run("eval", "--recon", tmp_path / "tv.mpir", "--ref", ph, "--out", tmp_path / "ev.tsv") == 0
    assert (tmp_path / "ev.tsv").read_text().startswith("method\t")

    capsys.readouterr()
    table = tmp_path / "sweep.tsv"
    assert run("sweep", "--config", cfg_file, "--sm", sm, "--models", models, "--methods", "tv", "deq",
               "--count", 2, "--out", table) == 0
    rows = table.read_text().splitlines()
    assert rows[0].split("\t") == ["method", "snr_db", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"]
    pairs = {tuple(r.split("\t")[:2]) for r in rows[1:]}
    assert pairs == {(m, s) for m in ("tv", "deq") for s in ("15", "25", "35")}


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["recon", "--method", "nope"])
    assert info.value.code == 1
    assert run("recon", "--method", "tv") == 1
    assert "deqmpi recon" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"solver": {"admm": {"mu": -5}}}))
    assert run("gen-sm", "--config", bad, "--out", tmp_path / "x.mpir") == 2
    err = capsys.readouterr().err
    assert "gen-sm" in err and "mu" in err
    assert run("gen-sm", "--config", tmp_path / "missing.json", "--out", tmp_path / "x.mpir") == 2
    junk = tmp_path / "junk.mpir"
    junk.write_bytes(b"XXXX")
    assert run("eval", "--recon", junk, "--ref", junk) == 2


def test_model_kind_mismatch(tmp_path, identity_fixture, cfg_file):
    sm, _ = identity_fixture
    rdn = tmp_path / "rdn.mpir"
    assert run("pretrain-rdn", "--config", cfg_file, "--out", rdn) == 0
    ph, meas = tmp_path / "p.mpir", tmp_path / "m.mpir"
    run("gen-phantoms", "--config", cfg_file, "--count", 1, "--out", ph)
    run("emulate", "--sm", sm, "--phantoms", ph, "--out", meas)
    assert run("recon", "--sm", sm, "--meas", meas, "--method", "deq", "--model", rdn,
               "--out", tmp_path / "r.mpir") == 2


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--count", 2) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out and "implicit" in out
