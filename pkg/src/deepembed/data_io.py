"""Data ingestion, normalization, model persistence, and exports.

File surfaces:
  - IDX image/label containers (big-endian, magics 0x00000803 / 0x00000801)
  - numeric CSV tables with an optional header and label column
  - the "DREM" v1 binary model container (little-endian float64 sections,
    CRC-checked, byte-stable across save/load round trips)
  - embedding CSV (header x,y[,label]) and a deterministic SVG scatter

All writes go through a temp file and an atomic rename.
"""

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

MODEL_MAGIC = b"DREM"
MODEL_VERSION = 1

NORM_MODES = ("none", "minmax", "zscore")

# One fixed color per label code, cycled past ten classes.
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


class ModelFormatError(ValueError):
    pass


@dataclass
class NormDescriptor:
    """Per-feature affine transform y = (x - offset) * scale."""

    mode: str
    offset: np.ndarray
    scale: np.ndarray


@dataclass
class Dataset:
    X: np.ndarray
    labels: np.ndarray | None = None
    source: str = ""
    norm: NormDescriptor | None = None
    label_names: list | None = None  # original values behind integer codes

    @property
    def n(self):
        return self.X.shape[0]


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- IDX

def _read_be32(buf, offset, path):
    if offset + 4 > len(buf):
        raise ValueError(f"{path}: truncated at byte {len(buf)}, "
                         f"needed 4 bytes at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0], offset + 4


def load_idx(images_path, labels_path=None) -> Dataset:
    """Parse big-endian IDX images (and labels) into rows scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        buf = f.read()
    magic, off = _read_be32(buf, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(f"{images_path}: bad image magic 0x{magic:08x}, "
                         f"expected 0x{IDX_IMAGE_MAGIC:08x}")
    count, off = _read_be32(buf, off, images_path)
    rows, off = _read_be32(buf, off, images_path)
    cols, off = _read_be32(buf, off, images_path)
    need = count * rows * cols
    if len(buf) - off < need:
        raise ValueError(f"{images_path}: truncated at byte {len(buf)}, "
                         f"expected {off + need} bytes for {count} images")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    X = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0

    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as f:
            lbuf = f.read()
        magic, loff = _read_be32(lbuf, 0, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"{labels_path}: bad label magic 0x{magic:08x}, "
                             f"expected 0x{IDX_LABEL_MAGIC:08x}")
        lcount, loff = _read_be32(lbuf, loff, labels_path)
        if len(lbuf) - loff < lcount:
            raise ValueError(f"{labels_path}: truncated at byte {len(lbuf)}, "
                             f"expected {loff + lcount} bytes for {lcount} labels")
        if lcount != count:
            raise ValueError(f"{count} images but {lcount} labels")
        labels = np.frombuffer(lbuf, dtype=np.uint8, count=lcount,
                               offset=loff).astype(np.int64)
    return Dataset(X=X, labels=labels, source=str(images_path))


# ---------------------------------------------------------------- CSV

def load_csv(path, label_column=None, has_header=False) -> Dataset:
    """Load a rectangular numeric table.

    label_column may be a 0-based index or, with has_header, a column
    name; label values are integer-coded in order of first appearance so
    string labels work without a mapping file.
    """
    import csv as _csv

    with open(path, newline="") as f:
        reader = _csv.reader(f)
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: empty file")

    header = None
    if has_header:
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise ValueError(f"{path}: header but no data rows")

    width = len(rows[0])
    label_idx = None
    if label_column is not None:
        if isinstance(label_column, str) and not label_column.isdigit():
            if header is None:
                raise ValueError("label column by name requires a header")
            if label_column not in header:
                raise ValueError(f"label column {label_column!r} not in header {header}")
            label_idx = header.index(label_column)
        else:
            label_idx = int(label_column)
            if not 0 <= label_idx < width:
                raise ValueError(f"label column {label_idx} out of range for "
                                 f"{width} columns")

    n_features = width - (1 if label_idx is not None else 0)
    X = np.empty((len(rows), n_features))
    codes = np.empty(len(rows), dtype=np.int64) if label_idx is not None else None
    seen = {}
    names = []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: row {i + 1} has {len(row)} cells, "
                             f"expected {width}")
        fi = 0
        for j, cell in enumerate(row):
            if j == label_idx:
                key = cell.strip()
                if key not in seen:
                    seen[key] = len(names)
                    names.append(key)
                codes[i] = seen[key]
                continue
            try:
                X[i, fi] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell at row {i + 1}, "
                                 f"column {j + 1}: {cell!r}") from None
            fi += 1
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite values in table")
    return Dataset(X=X, labels=codes, source=str(path),
                   label_names=names if codes is not None else None)


def sniff_format(path):
    """IDX files start with the 0x0000 08xx magic; anything else is CSV."""
    with open(path, "rb") as f:
        head = f.read(4)
    if len(head) == 4:
        magic = struct.unpack(">I", head)[0]
        if magic in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC):
            return "idx"
    return "csv"


# -------------------------------------------------------- normalization

def identity_norm(dim) -> NormDescriptor:
    return NormDescriptor("none", np.zeros(dim), np.ones(dim))


def fit_normalizer(X, mode) -> NormDescriptor:
    if mode not in NORM_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}; "
                         f"choose from {NORM_MODES}")
    dim = X.shape[1]
    if mode == "none":
        return identity_norm(dim)
    if mode == "minmax":
        lo = X.min(axis=0)
        rng = X.max(axis=0) - lo
        scale = np.where(rng > 0.0, 1.0 / np.where(rng > 0.0, rng, 1.0), 0.0)
        return NormDescriptor(mode, lo, scale)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # a constant feature's std is round-off, not exactly zero
    tiny = 1e-12 * np.maximum(1.0, np.abs(mean))
    live = std > tiny
    scale = np.where(live, 1.0 / np.where(live, std, 1.0), 0.0)
    return NormDescriptor(mode, mean, scale)


def apply_normalizer(desc: NormDescriptor, X):
    """Constant features map to exactly 0, never NaN."""
    return (np.asarray(X, dtype=np.float64) - desc.offset) * desc.scale


def normalize(ds: Dataset, mode) -> Dataset:
    """Fit per-feature statistics on the dataset and transform it.

    The fitted descriptor rides along so a saved model can replay the
    training-time transform on out-of-sample data.
    """
    desc = fit_normalizer(ds.X, mode)
    return Dataset(X=apply_normalizer(desc, ds.X), labels=ds.labels,
                   source=ds.source, norm=desc, label_names=ds.label_names)


# ------------------------------------------------------ model container

@dataclass
class ModelArtifact:
    params: nn.NetworkParams
    config: dict = field(default_factory=dict)  # flat training-config echo
    norm: NormDescriptor | None = None


def _f64_bytes(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_model(artifact: ModelArtifact, path):
    spec = artifact.params.spec
    sections = []
    sections.append(("spec", _canonical_json({
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "taps": spec.taps,
        "output_dim": spec.output_dim,
    })))
    blobs = []
    for layer in artifact.params.layers:
        blobs.append(_f64_bytes(layer.weights))
        blobs.append(_f64_bytes(layer.bias))
        if layer.has_bn:
            blobs.append(_f64_bytes(layer.bn_gamma))
            blobs.append(_f64_bytes(layer.bn_beta))
            blobs.append(_f64_bytes(layer.bn_running_mean))
            blobs.append(_f64_bytes(layer.bn_running_var))
            blobs.append(struct.pack("<dd", layer.bn_momentum, layer.bn_epsilon))
    sections.append(("params", b"".join(blobs)))
    sections.append(("config", _canonical_json(artifact.config)))
    norm = artifact.norm or identity_norm(spec.input_dim)
    sections.append(("norm", _canonical_json({"mode": norm.mode})))
    sections.append(("norm_offset", _f64_bytes(norm.offset)))
    sections.append(("norm_scale", _f64_bytes(norm.scale)))

    out = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(sections))]
    for name, payload in sections:
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    body = b"".join(out)
    _atomic_write(path, body + struct.pack("<I", zlib.crc32(body)))


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise ModelFormatError(f"truncated model file: wanted {n} bytes for "
                               f"{what} at offset {offset}")
    return buf[offset:offset + n], offset + n


def load_model(path) -> ModelArtifact:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12 + 4:
        raise ModelFormatError("file too short to be a model container")
    body, crc_bytes = buf[:-4], buf[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise ModelFormatError("checksum mismatch: file is corrupted")
    if body[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {body[:4]!r}, expected {MODEL_MAGIC!r}")
    version, n_sections = struct.unpack_from("<II", body, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    off = 12
    sections = {}
    for _ in range(n_sections):
        raw, off = _take(body, off, 4, "section name length")
        (nlen,) = struct.unpack("<I", raw)
        raw, off = _take(body, off, nlen, "section name")
        name = raw.decode()
        raw, off = _take(body, off, 8, "section payload length")
        (plen,) = struct.unpack("<Q", raw)
        payload, off = _take(body, off, plen, f"section {name!r}")
        sections[name] = payload
    for required in ("spec", "params", "config", "norm", "norm_offset",
                     "norm_scale"):
        if required not in sections:
            raise ModelFormatError(f"missing section {required!r}")

    meta = json.loads(sections["spec"])
    spec = nn.NetworkSpec(input_dim=meta["input_dim"],
                          hidden_dims=tuple(meta["hidden_dims"]),
                          taps=meta["taps"], output_dim=meta["output_dim"])
    payload = sections["params"]
    pos = 0

    def arr(shape):
        nonlocal pos
        n = int(np.prod(shape)) * 8
        raw, pos = _take(payload, pos, n, "parameter block")
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    dims = spec.layer_dims()
    layers = []
    for li, (din, dout) in enumerate(dims):
        w = arr((din, dout))
        b = arr((dout,))
        if li < len(dims) - 1:
            gamma, beta = arr((dout,)), arr((dout,))
            rmean, rvar = arr((dout,)), arr((dout,))
            raw, pos = _take(payload, pos, 16, "batch-norm constants")
            momentum, epsilon = struct.unpack("<dd", raw)
            layers.append(nn.LayerParams(w, b, gamma, beta, rmean, rvar,
                                         momentum, epsilon))
        else:
            layers.append(nn.LayerParams(w, b))
    if pos != len(payload):
        raise ModelFormatError(f"{len(payload) - pos} trailing bytes in params")

    norm_meta = json.loads(sections["norm"])
    norm = NormDescriptor(
        mode=norm_meta["mode"],
        offset=np.frombuffer(sections["norm_offset"], dtype="<f8").copy(),
        scale=np.frombuffer(sections["norm_scale"], dtype="<f8").copy())
    return ModelArtifact(params=nn.NetworkParams(spec, layers),
                         config=json.loads(sections["config"]), norm=norm)


# ------------------------------------------------------------- exports

def _fmt(v):
    return repr(float(v))


def export_embedding(Y, labels, path):
    """CSV with header x,y[,label]; byte-deterministic for equal input."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError("embedding must be 2-D")
    d = Y.shape[1]
    coords = ["x", "y", "z"][:d] + [f"c{i}" for i in range(3, d)]
    header = ",".join(coords) + (",label" if labels is not None else "")
    lines = [header]
    for i in range(Y.shape[0]):
        cells = [_fmt(v) for v in Y[i]]
        if labels is not None:
            cells.append(str(int(labels[i])))
        lines.append(",".join(cells))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_embedding_csv(path):
    ds = load_csv(path, label_column=None, has_header=True)
    with open(path) as f:
        header = [c.strip() for c in f.readline().split(",")]
    if header and header[-1] == "label":
        ds = load_csv(path, label_column="label", has_header=True)
        labels = np.array([int(name) if name.lstrip("-").isdigit() else code
                           for code, name in zip(ds.labels,
                                                 np.array(ds.label_names)[ds.labels])])
        return ds.X, labels
    return ds.X, None


def export_scatter_svg(Y, labels, path, size=800, margin=40, radius=2.0):
    """SVG 1.1 scatter with one palette color per label code.

    Output bytes are a pure function of the input arrays.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != 2:
        raise ValueError(f"SVG scatter needs an N x 2 embedding, got {Y.shape}")
    lo = Y.min(axis=0)
    hi = Y.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    inner = size - 2 * margin
    px = margin + (Y[:, 0] - lo[0]) / span[0] * inner
    py = margin + (hi[1] - Y[:, 1]) / span[1] * inner  # flip: SVG y grows down

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n',
        f'<rect width="{size}" height="{size}" fill="white"/>\n',
    ]
    for i in range(Y.shape[0]):
        color = PALETTE[int(labels[i]) % len(PALETTE)] if labels is not None \
            else PALETTE[0]
        parts.append(f'<circle cx="{px[i]:.3f}" cy="{py[i]:.3f}" '
                     f'r="{radius}" fill="{color}" fill-opacity="0.7"/>\n')
    parts.append("</svg>\n")
    _atomic_write(path, "".join(parts).encode())


def write_text(path, text):
    _atomic_write(path, text.encode())


# -------------------------------------------------------------- config

CONFIG_DEFAULTS = {
    "batch_size": 2500,
    "seed": 0,
    "perplexity": 30.0,
    "perplexity_tol": 1e-3,
    "perplexity_max_iter": 100,
    "alpha": 1.0,
    "umap_k": 15,
    "umap_tol": 1e-3,
    "umap_max_iter": 100,
    "umap_a": 1.0,
    "umap_b": 1.0,
    "stage_plan": "tsne:raw:100,tsne:dense2000:50,tsne:dense500:50,"
                  "tsne:dense100:50,umap:raw:100",
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_epsilon": 1e-7,
    "bn_momentum": 0.9,
    "bn_epsilon": 1e-5,
    "hidden_dims": "500,500,500,500,500,2000,500,100",
    "taps": "dense2000:5,dense500:6,dense100:7",
    "output_dim": 2,
    "normalize": "none",
    "log_every": 1,
    "data_format": "auto",
    "csv_has_header": False,
    "csv_label_column": "",
    "data": "",
    "labels": "",
    "out": "",
}


def parse_config_text(text) -> dict:
    """Flat key=value lines; '#' comments; unknown keys are rejected."""
    cfg = dict(CONFIG_DEFAULTS)
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in cfg:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        default = CONFIG_DEFAULTS[key]
        try:
            if isinstance(default, bool):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError
                cfg[key] = value.lower() in ("true", "1")
            elif isinstance(default, int):
                cfg[key] = int(value)
            elif isinstance(default, float):
                cfg[key] = float(value)
            else:
                cfg[key] = value
        except ValueError:
            raise ValueError(f"config line {ln}: bad value {value!r} for "
                             f"{key!r}") from None
    return cfg


def load_config(path) -> dict:
    with open(path) as f:
        return parse_config_text(f.read())


def format_config(cfg: dict) -> str:
    lines = [f"{k}={cfg[k]}" for k in CONFIG_DEFAULTS]
    return "\n".join(lines) + "\n"


def parse_stage_plan(text):
    from .trainer import Phase

    phases = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 3:
            raise ValueError(f"stage plan entry {item!r}: expected "
                             "loss:source:epochs")
        phases.append(Phase(parts[0].strip(), parts[1].strip(), int(parts[2])))
    if not phases:
        raise ValueError("stage plan is empty")
    return phases


def parse_int_list(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def parse_tap_map(text):
    taps = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, idx = item.partition(":")
        if not idx:
            raise ValueError(f"tap entry {item!r}: expected name:layer_index")
        taps[name.strip()] = int(idx)
    return taps


def build_train_config(cfg: dict):
    from .affinity import PerplexityConfig, UmapGraphConfig
    from .losses import TsneKernelConfig, UmapKernelConfig
    from .trainer import TrainConfig

    return TrainConfig(
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        perplexity=PerplexityConfig(cfg["perplexity"], cfg["perplexity_tol"],
                                    cfg["perplexity_max_iter"]),
        umap_graph=UmapGraphConfig(cfg["umap_k"], cfg["umap_tol"],
                                   cfg["umap_max_iter"]),
        tsne_kernel=TsneKernelConfig(cfg["alpha"]),
        umap_kernel=UmapKernelConfig(cfg["umap_a"], cfg["umap_b"]),
        plan=parse_stage_plan(cfg["stage_plan"]),
        lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
        adam_epsilon=cfg["adam_epsilon"], log_every=cfg["log_every"])


def build_spec(cfg: dict, input_dim) -> nn.NetworkSpec:
    return nn.NetworkSpec(input_dim=input_dim,
                          hidden_dims=parse_int_list(cfg["hidden_dims"]),
                          taps=parse_tap_map(cfg["taps"]),
                          output_dim=cfg["output_dim"])


def load_dataset(path, labels_path=None, cfg=None) -> Dataset:
    """Dispatch on format: IDX magic wins, anything else parses as CSV."""
    cfg = cfg or CONFIG_DEFAULTS
    fmt = cfg.get("data_format", "auto")
    if fmt == "auto":
        fmt = sniff_format(path)
    if fmt == "idx":
        return load_idx(path, labels_path)
    if fmt != "csv":
        raise ValueError(f"unknown data format {fmt!r}")
    label_col = cfg.get("csv_label_column", "") or None
    ds = load_csv(path, label_column=label_col,
                  has_header=cfg.get("csv_has_header", False))
    if labels_path is not None:
        lds = load_csv(labels_path, label_column=0, has_header=False)
        if lds.labels.shape[0] != ds.n:
            raise ValueError(f"{ds.n} rows but {lds.labels.shape[0]} labels")
        ds.labels = lds.labels
        ds.label_names = lds.label_names
    return ds
