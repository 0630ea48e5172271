"""Tensor container format, model manifests and solution persistence.

Container layout (all integers little-endian)::

    b"MLRQ" | version u32 | entry count u32 |
    per entry: name length u16 | name utf-8 | dtype u8 | ndim u8 |
               dims u64 * ndim | row-major data

dtype 1 is float32, dtype 2 is int32.
"""

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from .compressed import CompressedLayer
from .exceptions import (
    BadMagic,
    BrokenChain,
    DuplicateName,
    InputError,
    MissingTensor,
    ShapeMismatch,
    TruncatedBuffer,
    UnsupportedVersion,
)
from .intra_search import LOWRANK
from .netsim import ACTIVATIONS, Layer, SequentialModel
from .quantizer import QuantParams

MAGIC = b"MLRQ"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
DTYPE_CODES = {"f": 1, "i": 2}


class TensorContainer:
    """Ordered named tensors. Entries keep insertion order."""

    def __init__(self, entries=None):
        self._entries: List[Tuple[str, np.ndarray]] = []
        for name, arr in entries or []:
            self._entries.append((name, _normalize(arr)))

    def add(self, name, arr):
        if name in self:
            raise DuplicateName(f"tensor {name!r} already present")
        _check_name(name)
        self._entries.append((name, _normalize(arr)))

    def __contains__(self, name):
        return any(n == name for n, _ in self._entries)

    def __getitem__(self, name):
        for n, arr in self._entries:
            if n == name:
                return arr
        raise MissingTensor(f"tensor {name!r} not found")

    def __len__(self):
        return len(self._entries)

    def names(self):
        return [n for n, _ in self._entries]

    def items(self):
        return list(self._entries)

    def validate(self):
        seen = set()
        for name, _ in self._entries:
            _check_name(name)
            if name in seen:
                raise DuplicateName(f"duplicate tensor name {name!r}")
            seen.add(name)

    def __eq__(self, other):
        if not isinstance(other, TensorContainer) or self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for (_, a), (_, b) in zip(self._entries, other._entries)
        )


def _check_name(name):
    if not isinstance(name, str) or not name:
        raise InputError("tensor names must be non-empty strings")
    if len(name.encode("utf-8")) > 0xFFFF:
        raise InputError("tensor name too long")


def _normalize(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f4")
    if arr.dtype.kind in "iub":
        return np.ascontiguousarray(arr, dtype="<i4")
    raise InputError(f"unsupported dtype {arr.dtype}")


def container_bytes(container):
    container.validate()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(container)))
    for name, arr in container.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_CODES[arr.dtype.kind], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def write_container(container, path):
    data = container_bytes(container)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_container(data):
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedBuffer("header truncated")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"container version {version} not supported")
    off = 12
    out = TensorContainer()

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise TruncatedBuffer(f"need {n} bytes at offset {off}, file has {len(data)}")
        chunk = data[off:off + n]
        off += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InputError(f"tensor name is not valid UTF-8: {exc}") from exc
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise InputError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
        if name in out:
            raise DuplicateName(f"duplicate tensor name {name!r}")
        out.add(name, arr)
    return out


def read_container(path):
    with open(path, "rb") as fh:
        return parse_container(fh.read())


@dataclass
class LayerSpec:
    name: str
    in_features: int
    out_features: int
    weight: str
    bias: Optional[str] = None
    activation: str = "none"
    compressible: bool = True


@dataclass
class ModelManifest:
    model_name: str
    layers: List[LayerSpec]
    calibration_inputs: str
    hessians: Dict[str, str] = field(default_factory=dict)
    container: str = "model.mlrq"
    base_dir: str = "."

    def to_dict(self):
        return {
            "model_name": self.model_name,
            "container": self.container,
            "layers": [
                {k: v for k, v in vars(s).items() if v is not None}
                for s in self.layers
            ],
            "calibration_inputs": self.calibration_inputs,
            "hessians": dict(self.hessians),
        }


def parse_manifest(doc, base_dir="."):
    if not isinstance(doc, dict):
        raise InputError("manifest must be a mapping")
    try:
        layers = [
            LayerSpec(
                name=str(l["name"]),
                in_features=int(l["in_features"]),
                out_features=int(l["out_features"]),
                weight=str(l["weight"]),
                bias=None if l.get("bias") is None else str(l["bias"]),
                activation=str(l.get("activation", "none")),
                compressible=bool(l.get("compressible", True)),
            )
            for l in doc["layers"]
        ]
        manifest = ModelManifest(
            model_name=str(doc.get("model_name", "model")),
            layers=layers,
            calibration_inputs=str(doc["calibration_inputs"]),
            hessians={str(k): str(v) for k, v in (doc.get("hessians") or {}).items()},
            container=str(doc.get("container", "model.mlrq")),
            base_dir=str(base_dir),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed manifest: {exc!r}") from exc
    if not layers:
        raise InputError("manifest declares no layers")
    for s in layers:
        if s.in_features < 1 or s.out_features < 1:
            raise InputError(f"layer {s.name}: feature counts must be positive")
        if s.activation not in ACTIVATIONS:
            raise InputError(f"layer {s.name}: unknown activation {s.activation!r}")
    return manifest


def check_chain(manifest):
    for prev, cur in zip(manifest.layers, manifest.layers[1:]):
        if cur.in_features != prev.out_features:
            raise BrokenChain(
                f"layer {cur.name} has in_features {cur.in_features}, "
                f"but {prev.name} has out_features {prev.out_features}"
            )


def _resolve_ref(ref, manifest, cache):
    """Tensor reference ``name`` (default container) or ``file#name``."""
    if "#" in ref:
        fname, tname = ref.rsplit("#", 1)
    else:
        fname, tname = manifest.container, ref
    path = os.path.join(manifest.base_dir, fname)
    if path not in cache:
        if not os.path.exists(path):
            raise MissingTensor(f"container file {path} not found")
        cache[path] = read_container(path)
    return cache[path][tname]


def load_model(manifest_path):
    """Load and validate a manifest and every tensor it references.

    Returns ``(manifest, container)``; the container maps each reference
    string used in the manifest to its tensor.
    """
    path = Path(manifest_path)
    if not path.exists():
        raise InputError(f"manifest {path} not found")
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    manifest = parse_manifest(doc, base_dir=str(path.parent))
    check_chain(manifest)
    cache = {}
    tensors = TensorContainer()

    def fetch(ref, shape, what):
        arr = _resolve_ref(ref, manifest, cache)
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise ShapeMismatch(f"{what} {ref!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}")
        if ref not in tensors:
            tensors.add(ref, arr)
        return arr

    names = {s.name for s in manifest.layers}
    for s in manifest.layers:
        fetch(s.weight, (s.out_features, s.in_features), f"layer {s.name} weight")
        if s.bias is not None:
            fetch(s.bias, (s.out_features,), f"layer {s.name} bias")
    calib = fetch(manifest.calibration_inputs, None, "calibration inputs")
    if calib.ndim != 2 or calib.shape[1] != manifest.layers[0].in_features:
        raise ShapeMismatch(
            f"calibration inputs of shape {calib.shape} do not match "
            f"{manifest.layers[0].in_features} input features"
        )
    by_name = {s.name: s for s in manifest.layers}
    for lname, ref in manifest.hessians.items():
        if lname not in names:
            raise InputError(f"hessian given for unknown layer {lname!r}")
        s = by_name[lname]
        fetch(ref, (s.out_features, s.in_features), f"hessian of {lname}")
    return manifest, tensors


def build_model(manifest, tensors):
    layers = [
        Layer(
            name=s.name,
            weight=tensors[s.weight],
            bias=None if s.bias is None else tensors[s.bias],
            activation=s.activation,
            compressible=s.compressible,
        )
        for s in manifest.layers
    ]
    hessians = {k: np.asarray(tensors[v], dtype=np.float64) for k, v in manifest.hessians.items()}
    return SequentialModel(layers, manifest.model_name, hessians)


def load_sequential(manifest_path):
    """Convenience: ``(model, calibration_inputs, manifest)``."""
    manifest, tensors = load_model(manifest_path)
    model = build_model(manifest, tensors)
    calib = np.asarray(tensors[manifest.calibration_inputs], dtype=np.float64)
    return model, calib, manifest


def write_model(out_dir, model, calibration, hessians=None, container="model.mlrq"):
    """Write a model as manifest plus container; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = TensorContainer()
    specs = []
    for l in model.layers:
        tc.add(f"{l.name}.weight", l.weight)
        bias = None
        if l.bias is not None:
            bias = f"{l.name}.bias"
            tc.add(bias, l.bias)
        specs.append(LayerSpec(l.name, l.n_in, l.n_out, f"{l.name}.weight", bias,
                               l.activation, l.compressible))
    tc.add("calibration", calibration)
    hrefs = {}
    for name, H in (hessians or {}).items():
        hrefs[name] = f"{name}.hessian"
        tc.add(hrefs[name], H)
    write_container(tc, out_dir / container)
    manifest = ModelManifest(model.name, specs, "calibration", hrefs, container)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return path


# solution persistence

REPORT_COLUMNS = ("layer", "kind", "rank", "b_W", "b_A", "b_B", "memory_bits", "phi", "interpolated")
SOLUTION_CONTAINER = "compressed.mlrq"
REPORT_FILE = "solution.txt"
SOLUTION_JSON = "solution.json"


def solution_rows(solution, layer_names, metrics=None):
    rows = []
    for l, (name, cand) in enumerate(zip(layer_names, solution.candidates)):
        j = solution.choices[l]
        phi = interp = None
        if metrics is not None:
            phi = float(metrics[l].phi[j])
            interp = bool(metrics[l].interpolated[j])
        rows.append({
            "layer": name,
            "kind": cand.kind,
            "rank": cand.rank if cand.is_lowrank else "-",
            "b_W": "-" if cand.is_lowrank else cand.bits_w,
            "b_A": cand.bits_a if cand.is_lowrank else "-",
            "b_B": cand.bits_b if cand.is_lowrank else "-",
            "memory_bits": cand.memory_bits,
            "phi": "-" if phi is None else repr(phi),
            "interpolated": "-" if interp is None else str(interp).lower(),
        })
    return rows


def format_report(model_name, rows, solution, activation_bits=None):
    lines = [f"# solution report: {model_name}", "\t".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append("\t".join(str(row[c]) for c in REPORT_COLUMNS))
    for name, b in (activation_bits or {}).items():
        lines.append(f"activation\t{name}\t{b}")
    lines.append(f"total_bits\t{solution.total_memory_bits}")
    lines.append(f"budget_bits\t{solution.budget_bits}")
    lines.append(f"objective\t{solution.objective!r}")
    return "\n".join(lines) + "\n"


def _add_params(tc, prefix, p):
    tc.add(f"{prefix}.scales", p.scales)
    tc.add(f"{prefix}.zero_points", p.zero_points)
    tc.add(f"{prefix}.bits", np.array([p.bits]))


def _read_params(tc, prefix):
    return QuantParams(
        tc[f"{prefix}.scales"].astype(np.float64),
        tc[f"{prefix}.zero_points"].astype(np.int64),
        int(tc[f"{prefix}.bits"][0]),
    )


def compressed_container(layers, activation_params=None):
    tc = TensorContainer()
    for layer in layers:
        tags = ("A", "B") if layer.kind == LOWRANK else ("W",)
        for tag, codes, p in zip(tags, layer.codes, layer.params):
            tc.add(f"{layer.name}.{tag}.codes", codes)
            _add_params(tc, f"{layer.name}.{tag}", p)
    for name, p in (activation_params or {}).items():
        _add_params(tc, f"{name}.act", p)
    return tc


def save_solution(solution, compressed_layers, out_dir, model_name="model", metrics=None,
                  activation_params=None, extra=None):
    """Write the text report, a JSON summary and the compressed container."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [c.name for c in compressed_layers]
    rows = solution_rows(solution, names, metrics)
    activation_bits = {n: p.bits for n, p in (activation_params or {}).items()}
    (out / REPORT_FILE).write_text(format_report(model_name, rows, solution, activation_bits))
    write_container(compressed_container(compressed_layers, activation_params),
                    out / SOLUTION_CONTAINER)
    with open(out / "solution.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summary = {
        "model_name": model_name,
        "layers": [
            {"name": n, "kind": c.kind, "rank": c.rank, "bits_w": c.bits_w,
             "bits_a": c.bits_a, "bits_b": c.bits_b, "memory_bits": c.memory_bits}
            for n, c in zip(names, solution.candidates)
        ],
        "total_memory_bits": solution.total_memory_bits,
        "budget_bits": solution.budget_bits,
        "objective": solution.objective,
        "activation_bits": dict(activation_bits or {}),
    }
    if extra:
        summary.update(extra)
    (out / SOLUTION_JSON).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows


def load_compressed(out_dir, layer_names=None):
    """Read compressed layers back from a solution directory."""
    out = Path(out_dir)
    summary = json.loads((out / SOLUTION_JSON).read_text())
    tc = read_container(out / SOLUTION_CONTAINER)
    layers = []
    for entry in summary["layers"]:
        name, kind = entry["name"], entry["kind"]
        tags = ("A", "B") if kind == LOWRANK else ("W",)
        codes = tuple(tc[f"{name}.{tag}.codes"].astype(np.int64) for tag in tags)
        params = tuple(_read_params(tc, f"{name}.{tag}") for tag in tags)
        layers.append(CompressedLayer(name, kind, codes, params))
    act = {n: _read_params(tc, f"{n}.act") for n in summary.get("activation_bits", {})}
    return layers, act, summary
