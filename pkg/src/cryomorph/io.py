"""Volume files (MRC mode 2, raw + sidecar), manifests, run configs, checkpoints, CSVs.

Checkpoint layout (little-endian):

    bytes 0-7    magic b"CMCKPT01"
    bytes 8-15   uint64 header length H
    next H bytes UTF-8 JSON header {"format", "config", "meta", "params"}
    remainder    float32 parameter data, concatenated in header order

Each ``params`` entry is ``{"name", "shape", "offset"}`` with ``offset`` in
bytes from the start of the data block.
"""

from __future__ import annotations

import csv
import io as _io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigError, CorruptHeader, SidecarMissing, SizeMismatch, TruncatedData,
                     UnsupportedMode)
from .infer import InferConfig
from .nn import Decoder, Encoder, NetConfig
from .preprocess import PreprocessConfig
from .sim import PHANTOM_KINDS, CtfParams, ImagingParams
from .train import TrainConfig
from .volume import Volume

MRC_HEADER = 1024
CKPT_MAGIC = b"CMCKPT01"


# ---------------------------------------------------------------- MRC


def write_mrc(path, v: Volume) -> None:
    """Mode-2 MRC: 1024-byte header, float32 data with x fastest."""
    d = v.d
    data = v.data.astype("<f4")
    header = bytearray(MRC_HEADER)
    struct.pack_into("<3i", header, 0, d, d, d)
    struct.pack_into("<i", header, 12, 2)
    struct.pack_into("<3i", header, 28, d, d, d)
    struct.pack_into("<3f", header, 40, *(d * v.voxel_size,) * 3)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)
    struct.pack_into("<3f", header, 76, float(data.min()), float(data.max()), float(data.mean()))
    header[208:212] = b"MAP "
    header[212:216] = bytes((0x44, 0x44, 0, 0))
    with open(path, "wb") as f:
        f.write(bytes(header))
        # data[x, y, z] with x fastest is the Fortran order of the array
        f.write(data.tobytes(order="F"))


def read_mrc(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < MRC_HEADER:
        raise CorruptHeader(f"{path}: file shorter than the 1024-byte header")
    if raw[208:212] != b"MAP ":
        raise CorruptHeader(f"{path}: missing 'MAP ' tag")
    if raw[212] != 0x44:
        raise CorruptHeader(f"{path}: only little-endian files are supported")
    nx, ny, nz, mode = struct.unpack_from("<4i", raw, 0)
    if mode != 2:
        raise UnsupportedMode(f"{path}: mode {mode} (only mode 2 is supported)")
    if not (nx == ny == nz) or nx < 2:
        raise CorruptHeader(f"{path}: expected a cube, got {nx}x{ny}x{nz}")
    ext = struct.unpack_from("<i", raw, 92)[0]
    mx = struct.unpack_from("<i", raw, 28)[0]
    cella = struct.unpack_from("<f", raw, 40)[0]
    if ext < 0 or mx <= 0:
        raise CorruptHeader(f"{path}: invalid header fields")
    start = MRC_HEADER + ext
    nbytes = 4 * nx * ny * nz
    if len(raw) < start + nbytes:
        raise TruncatedData(f"{path}: expected {nbytes} data bytes, found {len(raw) - start}")
    data = np.frombuffer(raw, dtype="<f4", count=nx * ny * nz, offset=start)
    data = data.reshape((nx, ny, nz), order="F").astype(np.float64)
    return Volume(data, float(cella) / mx)


# ---------------------------------------------------------------- raw + sidecar


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_raw(path, v: Volume) -> None:
    """Raw little-endian float32 (x fastest) plus a JSON sidecar."""
    Path(path).write_bytes(v.data.astype("<f4").tobytes(order="F"))
    meta = {"d": v.d, "voxel_size": float(np.float32(v.voxel_size)), "byte_order": "little",
            "dtype": "float32", "order": "x-fastest"}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_raw(path) -> Volume:
    side = sidecar_path(path)
    if not side.exists():
        raise SidecarMissing(f"{path}: sidecar {side.name} not found")
    meta = json.loads(side.read_text())
    if meta.get("byte_order", "little") != "little":
        raise CorruptHeader(f"{side}: unsupported byte order {meta['byte_order']}")
    d = int(meta["d"])
    raw = Path(path).read_bytes()
    if len(raw) != 4 * d**3:
        raise SizeMismatch(f"{path}: {len(raw)} bytes, sidecar d={d} needs {4 * d**3}")
    data = np.frombuffer(raw, dtype="<f4").reshape((d, d, d), order="F").astype(np.float64)
    return Volume(data, float(meta["voxel_size"]))


def write_volume(path, v: Volume) -> None:
    if str(path).endswith(".mrc"):
        write_mrc(path, v)
    else:
        write_raw(path, v)


def read_volume(path) -> Volume:
    return read_mrc(path) if str(path).endswith(".mrc") else read_raw(path)


# ---------------------------------------------------------------- manifest


@dataclass
class Manifest:
    entries: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        paths = [e["path"] for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")

    def labels(self) -> np.ndarray:
        return np.array([e["class_id"] for e in self.entries])

    def to_json(self) -> str:
        return json.dumps({"metadata": self.metadata, "entries": self.entries},
                          indent=2, sort_keys=True) + "\n"


def write_manifest(path, m: Manifest) -> None:
    Path(path).write_text(m.to_json())


def read_manifest(path) -> Manifest:
    doc = json.loads(Path(path).read_text())
    return Manifest(doc["entries"], doc.get("metadata", {}))


def load_stack(manifest: Manifest, root) -> tuple:
    """Read every manifest volume relative to ``root``; returns ``(stack, voxel_size)``."""
    vols = [read_volume(Path(root) / e["path"]) for e in manifest.entries]
    return np.stack([v.data for v in vols]), vols[0].voxel_size


# ---------------------------------------------------------------- run config


@dataclass(frozen=True)
class SimConfig:
    kinds: tuple = PHANTOM_KINDS
    n_per_class: int = 100
    box: int = 48
    voxel_size: float = 7.5
    snr: float = 0.1
    wedge_half_angle: float = 30.0
    apply_ctf: bool = True
    defocus_um: float = 5.0
    voltage_kv: float = 300.0
    cs_mm: float = 2.7
    amplitude_contrast: float = 0.07
    translation_bound: float = 2.0
    fmt: str = "mrc"

    def imaging(self) -> ImagingParams:
        ctf = CtfParams(self.voltage_kv, self.cs_mm, self.defocus_um, self.amplitude_contrast)
        return ImagingParams(self.snr, self.wedge_half_angle, ctf, self.apply_ctf,
                             self.translation_bound)


@dataclass(frozen=True)
class EvalConfig:
    align_max_shift: int = 2
    refine_alignment: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    sim: SimConfig = SimConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    net: NetConfig = NetConfig()
    train: TrainConfig = TrainConfig()
    infer: InferConfig = InferConfig()
    eval: EvalConfig = EvalConfig()


def _from_dict(cls, doc: dict, prefix: str = ""):
    if not isinstance(doc, dict):
        raise ConfigError(f"'{prefix or cls.__name__}' must be an object", key=prefix or None)
    known = {f.name: f for f in fields(cls)}
    for k in doc:
        if k not in known:
            key = f"{prefix}{k}"
            raise ConfigError(f"unknown config key '{key}'", key=key)
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        default = getattr(defaults, name)
        key = f"{prefix}{name}"
        if is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, key + ".")
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"'{key}' must be a list", key=key)
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"'{key}' must be a boolean", key=key)
            kwargs[name] = value
        elif isinstance(default, (int, float)) and default is not None:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"'{key}' must be a number", key=key)
            if isinstance(default, int) and not float(value).is_integer():
                raise ConfigError(f"'{key}' must be an integer", key=key)
            kwargs[name] = float(value) if isinstance(default, float) else int(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{prefix.rstrip('.') or cls.__name__}': {e}",
                          key=prefix.rstrip(".") or None) from e


def config_from_dict(doc: dict) -> RunConfig:
    return _from_dict(RunConfig, doc)


def config_to_dict(cfg: RunConfig) -> dict:
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (tuple, list)):
            return [conv(v) for v in x]
        return x
    return conv(asdict(cfg))


def dumps_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads_config(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return config_from_dict(doc)


def load_config(path) -> RunConfig:
    return loads_config(Path(path).read_text())


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, encoder: Encoder, decoder: Decoder, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, p in encoder.named_parameters() + decoder.named_parameters():
        arr = np.ascontiguousarray(p.values, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    net = asdict(encoder.cfg)
    net["channels"] = list(net["channels"])
    header = json.dumps({"format": 1, "config": net, "meta": meta or {}, "params": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns ``(encoder, decoder, meta)`` rebuilt from the stored config."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CorruptHeader(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen].decode())
    base = 16 + hlen
    cfg_doc = dict(header["config"])
    cfg_doc["channels"] = tuple(cfg_doc["channels"])
    cfg = NetConfig(**cfg_doc)
    rng = np.random.default_rng(0)
    enc, dec = Encoder(cfg, rng), Decoder(cfg, rng)
    params = dict(enc.named_parameters() + dec.named_parameters())
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if len(raw) < start + 4 * n:
            raise TruncatedData(f"{path}: parameter {e['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(e["shape"])
        p = params.get(e["name"])
        if p is None or p.values.shape != arr.shape:
            raise CorruptHeader(f"{path}: unexpected parameter {e['name']}")
        p.values = arr.astype(np.float32)
    return enc, dec, header["meta"]


# ---------------------------------------------------------------- CSV


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def write_metrics_csv(path, rows) -> None:
    """Rows of ``(run, metric, value)``."""
    Path(path).write_text(csv_text(("run", "metric", "value"), rows))


def read_metrics_csv(path) -> list:
    with open(path, newline="") as f:
        return [(r["run"], r["metric"], float(r["value"])) for r in csv.DictReader(f)]


def write_fsc_csv(path, curve) -> None:
    Path(path).write_text(csv_text(("frequency", "fsc"), zip(curve.frequencies, curve.values)))


def latent_columns(latent_dim: int, K: int) -> list:
    return (["index"] + [f"z{i}" for i in range(latent_dim)]
            + [f"theta{i}" for i in range(9)] + ["pc1", "pc2"]
            + [f"p{k}" for k in range(K)] + ["label"])


def write_latent_csv(path, z, theta, coords, posteriors, labels) -> None:
    cols = latent_columns(z.shape[1], posteriors.shape[1])
    rows = ([i, *z[i], *theta[i], *coords[i, :2], *posteriors[i], int(labels[i])]
            for i in range(len(z)))
    Path(path).write_text(csv_text(cols, rows))


def read_latent_csv(path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    pick = lambda prefix: body[:, [i for i, h in enumerate(header) if h.startswith(prefix)
                                   and h[len(prefix):].isdigit()]]
    return {"index": body[:, 0].astype(int), "z": pick("z"), "theta": pick("theta"),
            "coords": body[:, [header.index("pc1"), header.index("pc2")]],
            "posteriors": pick("p"), "label": body[:, -1].astype(int)}
