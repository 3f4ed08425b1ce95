"""On-disk formats: tensor containers, checkpoints, images and experiment configs."""
from __future__ import annotations

import dataclasses
import json
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deq import AndersonConfig, TrainConfig
from .errors import ConfigError, FormatError
from .forward import ScannerConfig, SystemMatrix
from .neural import LcConfig, ParamStore, RdnConfig
from .phantoms import PhantomSpec
from .solvers import AdmmConfig, admm_preset, art_lambda

MAGIC = b"MPIR"
VERSION = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2}


# ---------------------------------------------------------------- tensor container

def encode_container(entries) -> bytes:
    """Serialize a name -> array mapping (float64 or float32) to bytes."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    seen = set()
    for name, arr in entries.items():
        if name in seen:
            raise FormatError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise FormatError(f"entry {name!r}: dtype {arr.dtype} not storable (use float64/float32)")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise FormatError(f"entry {name!r}: name or rank too large")
        code = CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_container(buf: bytes):
    """Inverse of :func:`encode_container`; validates the whole buffer first."""
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated container while reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic: not an MPIR container")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(n, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8") from exc
        code, ndim = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = take(size, f"payload of {name!r}")
        if name in out:
            raise FormatError(f"duplicate entry name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def write_container(path, entries):
    data = encode_container(entries)
    Path(path).write_bytes(data)


def read_container(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read container {path}: {exc}") from exc
    return decode_container(buf)


# ---------------------------------------------------------------- typed payloads

def sm_entries(sm: SystemMatrix):
    return OrderedDict([
        ("stacked", sm.stacked),
        ("grid", np.array(sm.grid, dtype=np.float64)),
        ("row_labels", sm.row_labels.astype(np.float64)),
        ("row_snr", np.asarray(sm.row_snr, dtype=np.float64)),
        ("data_shape", np.array(sm.data_shape, dtype=np.float64)),
        ("data_index", sm.data_index.astype(np.float64)),
        ("n_rows_total", np.array(float(sm.n_rows_total))),
    ])


def sm_from_entries(e) -> SystemMatrix:
    need = ("stacked", "grid", "row_labels", "row_snr", "data_shape", "data_index")
    missing = [k for k in need if k not in e]
    if missing:
        raise FormatError(f"container lacks system-matrix entries {missing}")
    return SystemMatrix(
        np.array(e["stacked"], dtype=np.float64),
        tuple(int(v) for v in e["grid"]),
        e["row_labels"].astype(int),
        np.array(e["row_snr"], dtype=np.float64),
        tuple(int(v) for v in e["data_shape"]),
        e["data_index"].astype(int),
        int(e.get("n_rows_total", np.array(0.0))),
    )


def save_sm(path, sm: SystemMatrix):
    write_container(path, sm_entries(sm))


def load_sm(path) -> SystemMatrix:
    return sm_from_entries(read_container(path))


def save_params(path, params: ParamStore, meta=None, dtype=np.float64):
    """Checkpoint: tensors in ``path``; architecture/log metadata in ``path + '.json'``."""
    write_container(path, OrderedDict((k, np.asarray(v, dtype=dtype)) for k, v in params.values.items()))
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_params(path):
    """Returns (ParamStore, metadata dict or None)."""
    values = read_container(path)
    params = ParamStore(OrderedDict((k, np.array(v, dtype=np.float64)) for k, v in values.items()))
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else None
    return params, meta


def write_pgm(path, img, vmax=None):
    """8-bit binary portable graymap, linearly scaled from 0 to ``vmax``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    top = float(img.max()) if vmax is None else float(vmax)
    scaled = np.zeros(img.shape) if top <= 0 else np.clip(img / top, 0.0, 1.0)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if head is None:
        raise FormatError("not a binary PGM file")
    w, h = int(head[1]), int(head[2])
    pix = np.frombuffer(raw[head.end():head.end() + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise FormatError("truncated PGM payload")
    return pix.reshape(h, w)


# ---------------------------------------------------------------- experiment config

METHODS = ("l1", "tv", "hyb", "art", "deq", "deq-noLc", "unrolled", "e2e")


@dataclass(frozen=True)
class SolverSection:
    method: str = "deq"
    admm: AdmmConfig = AdmmConfig()
    art_lam: float = 0.1
    art_iters: int = 10
    anderson: AndersonConfig = AndersonConfig()
    discrepancy: int = 2
    unrolled_iters: int = 5

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"solver.method must be one of {METHODS}, got {self.method!r}")
        _prefixed("solver.admm", self.admm.validate)
        _prefixed("solver.anderson", self.anderson.validate)
        if not self.art_lam > 0:
            raise ConfigError(f"solver.art_lam must be positive, got {self.art_lam}")
        if self.art_iters < 1 or self.unrolled_iters < 1:
            raise ConfigError("solver.art_iters and solver.unrolled_iters must be >= 1")
        if self.discrepancy < 1:
            raise ConfigError("solver.discrepancy must be >= 1")
        return self


@dataclass(frozen=True)
class TrainingSection:
    train: TrainConfig = TrainConfig()
    rdn: RdnConfig = RdnConfig(n_res=2, f_r=8, n_conv=4, f_s=8)
    lc: LcConfig = LcConfig()
    n_train: int = 4096
    n_val: int = 256
    n_test: int = 256
    epochs_rdn: float = 10.0
    epochs_lc: float = 2.0
    epochs_deq: float = 1.0

    def validate(self):
        _prefixed("training.train", self.train.validate)
        for k in ("n_train", "n_val", "n_test"):
            if getattr(self, k) < 1:
                raise ConfigError(f"training.{k} must be >= 1")
        for k in ("epochs_rdn", "epochs_lc", "epochs_deq"):
            if getattr(self, k) < 0:
                raise ConfigError(f"training.{k} must be nonnegative")
        for name, cfg in (("rdn", self.rdn), ("lc", self.lc)):
            for k, v in dataclasses.asdict(cfg).items():
                if v < 1:
                    raise ConfigError(f"training.{name}.{k} must be >= 1")
        return self

    def stage(self, epochs):
        return dataclasses.replace(self.train, epochs=epochs)


@dataclass(frozen=True)
class ExperimentConfig:
    scanner: ScannerConfig = ScannerConfig()
    phantom: PhantomSpec = PhantomSpec()
    solver: SolverSection = SolverSection()
    training: TrainingSection = TrainingSection()

    def validate(self):
        _prefixed("scanner", self.scanner.validate)
        _check_phantom(self.phantom)
        self.solver.validate()
        self.training.validate()
        if tuple(self.phantom.grid) != tuple(self.scanner.grid):
            raise ConfigError("phantom.grid must equal scanner.grid")
        return self

    def to_dict(self):
        return _to_plain(self)


def _prefixed(where, check):
    try:
        check()
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_phantom(p: PhantomSpec):
    if p.kind not in ("vessel", "torus"):
        raise ConfigError(f"phantom.kind must be 'vessel' or 'torus', got {p.kind!r}")
    for k in ("n_branches", "width_px", "length_frac", "intensity"):
        lo, hi = getattr(p, k)
        if lo > hi or lo < 0:
            raise ConfigError(f"phantom.{k} must be an increasing nonnegative range")
    if p.blur_sigma < 0 or p.supersample < 1 or p.voxel_mm <= 0:
        raise ConfigError("phantom.blur_sigma, supersample and voxel_mm out of range")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, where, base):
    """Overlay the mapping ``data`` onto dataclass instance ``base`` of type ``cls``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    changes = {}
    for key, val in data.items():
        path = f"{where}.{key}" if where else key
        if key not in fields:
            raise ConfigError(f"unknown config key {path!r}")
        cur = getattr(base, key)
        if dataclasses.is_dataclass(cur):
            changes[key] = _build(type(cur), val, path, cur)
        elif isinstance(cur, tuple):
            if not isinstance(val, list) or len(val) != len(cur):
                raise ConfigError(f"{path} must be a list of {len(cur)} values")
            changes[key] = tuple(val)
        elif isinstance(cur, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{path} must be true or false")
            changes[key] = val
        elif isinstance(cur, (int, float)) or cur is None:
            if val is not None and (isinstance(val, bool) or not isinstance(val, (int, float))):
                raise ConfigError(f"{path} must be a number")
            if isinstance(cur, int) and not isinstance(val, int):
                raise ConfigError(f"{path} must be an integer")
            changes[key] = val
        else:
            if not isinstance(val, str):
                raise ConfigError(f"{path} must be a string")
            changes[key] = val
    try:
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


PRESETS = ("paper-l1", "paper-tv", "paper-hyb", "paper-art", "paper-deq")


def preset(name, snr_db=35.0) -> ExperimentConfig:
    """Named configurations with the published settings."""
    base = ExperimentConfig()
    if name in ("paper-l1", "paper-tv", "paper-hyb"):
        method = {"paper-l1": "l1", "paper-tv": "tv", "paper-hyb": "hyb"}[name]
        solver = dataclasses.replace(base.solver, method=method, admm=admm_preset(name, snr_db))
    elif name == "paper-art":
        solver = dataclasses.replace(base.solver, method="art", art_lam=art_lambda(snr_db), art_iters=10)
    elif name == "paper-deq":
        solver = dataclasses.replace(base.solver, method="deq", anderson=AndersonConfig(max_iters=25))
        train = dataclasses.replace(base.training.train, lr=1e-3, sigma1=0.1, snr_db=snr_db)
        return dataclasses.replace(base, solver=solver,
                                   training=dataclasses.replace(base.training, train=train)).validate()
    else:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return dataclasses.replace(base, solver=solver).validate()


def config_from_dict(data) -> ExperimentConfig:
    """Build a config from a plain mapping; ``"preset"`` picks the starting point."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    data = dict(data)
    name = data.pop("preset", None)
    snr = data.pop("preset_snr_db", 35.0)
    base = preset(name, snr) if name is not None else ExperimentConfig()
    return _build(ExperimentConfig, data, "", base).validate()


def load_config(path) -> ExperimentConfig:
    """Read a JSON config file, or a preset given as ``preset:<name>`` / a bare preset name."""
    text = str(path)
    if text.startswith("preset:"):
        return preset(text.split(":", 1)[1])
    if text in PRESETS and not Path(text).exists():
        return preset(text)
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(path, cfg: ExperimentConfig):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


__all__ = [
    "ExperimentConfig", "PRESETS", "SolverSection", "TrainingSection", "config_from_dict",
    "decode_container", "encode_container", "load_config", "load_params", "load_sm", "preset",
    "read_container", "read_pgm", "save_config", "save_params", "save_sm", "write_container",
    "write_pgm",
]
