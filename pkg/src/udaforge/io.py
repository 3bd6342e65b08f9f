"""Binary tensor/dataset containers, run configuration, checkpoints, logs.

Both file formats are fixed little-endian layouts with no platform padding:

  tensor:  "UDA1" | version u8=1 | dtype u8 (0=f32, 1=f64) | ndim u8 |
           ndim x u32 dims | row-major payload
  dataset: "UDS1" | version u8=1 | count u32 | per record:
           label u8 (255 unlabeled) | domain u8 | patient u32 |
           input mode u8 (0 spatial, 1 kspace) | embedded tensor

Every write goes through write-temp-then-rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .dataset import MODE_KSPACE, MODE_SPATIAL, Dataset
from .nets import NetSpec
from .train import CenterBank, TrainConfig, TrainState, STEP_COLUMNS

TENSOR_MAGIC = b"UDA1"
DATASET_MAGIC = b"UDS1"
FORMAT_VERSION = 1
DTYPE_F32, DTYPE_F64 = 0, 1
MODE_CODES = {MODE_SPATIAL: 0, MODE_KSPACE: 1}
MODE_NAMES = {v: k for k, v in MODE_CODES.items()}
MAX_DIM = 2**31  # per-extent cap; also guards total-size overflow


class FormatError(ValueError):
    """A container violated its byte layout; `code` names the violation."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


class ConfigError(ValueError):
    """A run configuration was rejected; `code` names the violation."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# tensor container


def tensor_to_bytes(arr, dtype=DTYPE_F64):
    arr = np.asarray(arr)
    if dtype == DTYPE_F32:
        payload = arr.astype("<f4").tobytes(order="C")
    elif dtype == DTYPE_F64:
        payload = arr.astype("<f8").tobytes(order="C")
    else:
        raise FormatError("bad_dtype", f"unknown dtype code {dtype}")
    head = TENSOR_MAGIC + struct.pack("<BBB", FORMAT_VERSION, dtype, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + payload


def tensor_from_bytes(buf, offset=0):
    """Parse one embedded tensor; returns (array, next offset)."""
    if len(buf) < offset + 7:
        raise FormatError("truncated", "tensor header cut short")
    magic = buf[offset : offset + 4]
    if magic != TENSOR_MAGIC:
        raise FormatError("bad_magic", f"expected {TENSOR_MAGIC!r}, got {magic!r}")
    version, dtype, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError("bad_version", f"unsupported version {version}")
    if dtype not in (DTYPE_F32, DTYPE_F64):
        raise FormatError("bad_dtype", f"unknown dtype code {dtype}")
    pos = offset + 7
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated", "dimension list cut short")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    total = 1
    for d in dims:
        if d >= MAX_DIM:
            raise FormatError("dim_overflow", f"extent {d} exceeds the cap")
        total *= d
        if total >= MAX_DIM:
            raise FormatError("dim_overflow", f"element count {total} exceeds the cap")
    itemsize = 4 if dtype == DTYPE_F32 else 8
    nbytes = total * itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated", "payload cut short")
    kind = "<f4" if dtype == DTYPE_F32 else "<f8"
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=kind).reshape(dims)
    return arr.copy(), pos + nbytes


def write_tensor(path, arr, dtype=DTYPE_F64):
    atomic_write_bytes(path, tensor_to_bytes(arr, dtype))


def read_tensor(path):
    arr, end = tensor_from_bytes(Path(path).read_bytes())
    return arr


# ---------------------------------------------------------------------------
# dataset container


def dataset_to_bytes(ds):
    mode_code = MODE_CODES[ds.mode]
    parts = [DATASET_MAGIC, struct.pack("<BI", FORMAT_VERSION, len(ds))]
    for i in range(len(ds)):
        parts.append(
            struct.pack(
                "<BBIB",
                int(ds.labels[i]),
                int(ds.domains[i]),
                int(ds.patients[i]),
                mode_code,
            )
        )
        parts.append(tensor_to_bytes(ds.x[i], DTYPE_F32))
    return b"".join(parts)


def dataset_from_bytes(buf):
    if len(buf) < 9:
        raise FormatError("truncated", "dataset header cut short")
    if buf[:4] != DATASET_MAGIC:
        raise FormatError("bad_magic", f"expected {DATASET_MAGIC!r}, got {buf[:4]!r}")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError("bad_version", f"unsupported version {version}")
    pos = 9
    xs, labels, domains, patients = [], [], [], []
    mode_code = None
    shape = None
    for _ in range(count):
        if len(buf) < pos + 7:
            raise FormatError("truncated", "record header cut short")
        label, domain, patient, mode = struct.unpack_from("<BBIB", buf, pos)
        pos += 7
        arr, pos = tensor_from_bytes(buf, pos)
        if mode_code is None:
            mode_code, shape = mode, arr.shape
            if mode not in MODE_NAMES:
                raise FormatError("bad_mode", f"unknown input mode {mode}")
        elif mode != mode_code or arr.shape != shape:
            raise FormatError(
                "inconsistent_records", "records disagree on mode or shape"
            )
        xs.append(arr)
        labels.append(label)
        domains.append(domain)
        patients.append(patient)
    if pos != len(buf):
        raise FormatError("truncated", "trailing bytes after the last record")
    if count == 0:
        return Dataset(
            MODE_SPATIAL,
            np.zeros((0, 4, 4), dtype=np.float32),
            np.zeros(0, dtype=np.uint8),
            np.zeros(0, dtype=np.uint8),
            np.zeros(0, dtype=np.uint32),
        )
    return Dataset(
        MODE_NAMES[mode_code],
        np.stack(xs),
        np.asarray(labels, dtype=np.uint8),
        np.asarray(domains, dtype=np.uint8),
        np.asarray(patients, dtype=np.uint32),
    )


def write_dataset(path, ds):
    atomic_write_bytes(path, dataset_to_bytes(ds))


def read_dataset(path):
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# run configuration

_SYNTH_KEYS = {
    "hw", "n_patients", "slices_per_patient", "mode", "source", "target",
}
_DOMAIN_KEYS = {
    "name", "intensity_range", "background_level", "texture_exponent",
    "texture_strength", "axis_ratio_range", "n_blobs_range", "noise_sigma", "gamma",
    "anatomy_scale", "seed",
}
_TRAIN_KEYS = set(TrainConfig().__dict__) | {
    "source", "target", "resume_from", "checkpoint_every",
}
_EVAL_KEYS = {"checkpoint", "dataset"}
_PROTOCOL_KEYS = {"source", "target", "k", "seeds", "folds", "fold_seed", "train"}
_REPORT_KEYS = {"protocol", "runs", "figures"}
_TOP_KEYS = {"synth", "train", "eval", "report", "out_dir"}


def _check_keys(block, allowed, where):
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(
            "unknown_key", f"{where}: unknown key(s) {sorted(unknown)}"
        )


def validate_config(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("bad_type", "configuration root must be an object")
    _check_keys(cfg, _TOP_KEYS, "top level")
    if "synth" in cfg:
        _check_keys(cfg["synth"], _SYNTH_KEYS, "synth")
        for side in ("source", "target"):
            if side in cfg["synth"]:
                _check_keys(cfg["synth"][side], _DOMAIN_KEYS, f"synth.{side}")
    if "train" in cfg:
        _check_keys(cfg["train"], _TRAIN_KEYS, "train")
    if "eval" in cfg:
        _check_keys(cfg["eval"], _EVAL_KEYS, "eval")
    if "report" in cfg:
        _check_keys(cfg["report"], _REPORT_KEYS, "report")
        if isinstance(cfg["report"].get("protocol"), dict):
            _check_keys(cfg["report"]["protocol"], _PROTOCOL_KEYS, "report.protocol")
            if "train" in cfg["report"]["protocol"]:
                _check_keys(
                    cfg["report"]["protocol"]["train"],
                    set(TrainConfig().__dict__),
                    "report.protocol.train",
                )
    return cfg


def load_config(path):
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("bad_json", str(e)) from e
    return validate_config(cfg)


def dump_config(cfg):
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# train log


def _fmt(v):
    return repr(float(v))


def steps_to_csv(log):
    lines = [",".join(STEP_COLUMNS)]
    for r in log.steps:
        lines.append(
            ",".join(
                [str(r.iteration), str(r.epoch)]
                + [_fmt(getattr(r, c)) for c in STEP_COLUMNS[2:]]
            )
        )
    return "\n".join(lines) + "\n"


def epochs_to_csv(log):
    lines = ["epoch,lr,ce,wasserstein,labeled_acc"]
    for r in log.epochs:
        lines.append(
            f"{r.epoch},{_fmt(r.lr)},{_fmt(r.ce)},{_fmt(r.wasserstein)},"
            f"{_fmt(r.labeled_acc)}"
        )
    return "\n".join(lines) + "\n"


def write_train_log(out_dir, log):
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / "trainlog.csv", steps_to_csv(log))
    atomic_write_text(out_dir / "trainlog_epochs.csv", epochs_to_csv(log))


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state(gen):
    return json.loads(json.dumps(gen.bit_generator.state))


def _restore_rng(state):
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen


def save_checkpoint(ckpt_dir, state):
    """Persist a TrainState at an epoch boundary."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    nets = {}
    counter = 0
    for net_name in sorted(state.params):
        ps = state.params[net_name]
        tensors = {}
        for pname in sorted(ps.tensors):
            entry = {}
            for tag, bank in (("t", ps.tensors), ("m", ps.m), ("v", ps.v)):
                fname = f"t{counter:04d}.ten"
                counter += 1
                write_tensor(ckpt_dir / fname, bank[pname], DTYPE_F64)
                entry[tag] = fname
            tensors[pname] = entry
        nets[net_name] = {
            "spec": state.specs[net_name].to_dict(),
            "adam_step": ps.step,
            "tensors": tensors,
        }
    write_tensor(ckpt_dir / "centers.ten", state.centers.c, DTYPE_F64)
    manifest = {
        "format": "uda-forge-checkpoint",
        "version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "total_steps": state.total_steps,
        "center_counts": [int(c) for c in state.centers.counts],
        "rng": {
            "labeled": _rng_state(state.rng_labeled),
            "unlabeled": _rng_state(state.rng_unlabeled),
            "critic": _rng_state(state.rng_critic),
        },
        "nets": nets,
    }
    atomic_write_text(ckpt_dir / "manifest.json", dump_config(manifest))


def load_checkpoint(ckpt_dir):
    """Rebuild the TrainState saved by save_checkpoint."""
    from .graph import ParamSet  # local import avoids a cycle at module load

    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    if manifest.get("format") != "uda-forge-checkpoint":
        raise FormatError("bad_magic", "not a checkpoint manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError("bad_version", f"unsupported version {manifest.get('version')}")
    config = TrainConfig.from_dict(manifest["config"])
    specs, params = {}, {}
    for net_name, block in manifest["nets"].items():
        specs[net_name] = NetSpec.from_dict(block["spec"])
        tensors, m, v = {}, {}, {}
        for pname, entry in block["tensors"].items():
            tensors[pname] = read_tensor(ckpt_dir / entry["t"])
            m[pname] = read_tensor(ckpt_dir / entry["m"])
            v[pname] = read_tensor(ckpt_dir / entry["v"])
        ps = ParamSet(tensors)
        ps.m, ps.v = m, v
        ps.step = int(block["adam_step"])
        params[net_name] = ps
    centers = CenterBank(
        read_tensor(ckpt_dir / "centers.ten"),
        np.asarray(manifest["center_counts"], dtype=np.int64),
    )
    return TrainState(
        config=config,
        specs=specs,
        params=params,
        centers=centers,
        epoch=int(manifest["epoch"]),
        iteration=int(manifest["iteration"]),
        total_steps=int(manifest["total_steps"]),
        rng_labeled=_restore_rng(manifest["rng"]["labeled"]),
        rng_unlabeled=_restore_rng(manifest["rng"]["unlabeled"]),
        rng_critic=_restore_rng(manifest["rng"]["critic"]),
    )
