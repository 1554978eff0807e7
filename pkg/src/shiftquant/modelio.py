"""Serialization: tensor blobs, float models, and quantized models.

Three file families, all little-endian and all gated by a magic number
plus an explicit version (layouts are frozen in docs/formats.md):

  tensor blob   16-byte header (magic 'SQTB', version, dtype code, rank,
                four uint16 dims) followed by raw row-major data
  float model   JSON manifest (nodes + tensor table) next to a weight
                blob with an 8-byte 'SQFB' header
  quant model   JSON manifest (unified modules, formats, precomputed
                shifts) next to an int8 blob with an 8-byte 'SQQB' header

A quantized file is self-contained: integer inference needs nothing but
the int8 blobs, the stored shift amounts, and the input format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BlobFormatError,
    DanglingRefError,
    InvalidInputError,
    ManifestParseError,
    ModelFormatError,
    VersionError,
)
from .fixedpoint import QuantParams, QuantizedTensor
from .graph import BNRefs, Graph, Model, Node, _tensor_refs
from .nnops import ConvAttrs

TENSOR_MAGIC = b"SQTB"
FLOAT_BLOB_MAGIC = b"SQFB"
QUANT_BLOB_MAGIC = b"SQQB"
FLOAT_MODEL_FORMAT = "shiftquant-float-model"
QUANT_MODEL_FORMAT = "shiftquant-quant-model"
FORMAT_VERSION = 1

_TENSOR_HEADER = struct.Struct("<4sBBBB4H")  # magic, version, dtype, rank, reserved, dims
_BLOB_HEADER = struct.Struct("<4sHH")  # magic, version, reserved

_DTYPE_CODES = {"float32": 0, "int8": 1, "int32": 2}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}


# ------------------------------------------------------------ tensor blobs


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write one array as a self-describing binary blob.

    Float arrays are stored as float32; integer arrays must already be
    int8 or int32.  Rank must be 1..4 and no dimension may exceed 65535.
    """
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype("<f4")
    elif arr.dtype == np.int8:
        arr = arr.astype("<i1")
    elif np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < -(2**31) or arr.max() > 2**31 - 1):
            raise InvalidInputError("integer tensor does not fit int32")
        arr = arr.astype("<i4")
    else:
        raise InvalidInputError(f"unsupported tensor dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise InvalidInputError(f"tensor rank must be 1..4, got {arr.ndim}")
    if max(arr.shape) > 0xFFFF:
        raise InvalidInputError(f"dimension too large for the format: {arr.shape}")
    dims = list(arr.shape) + [0] * (4 - arr.ndim)
    code = _DTYPE_CODES[arr.dtype.name]
    with open(path, "wb") as f:
        f.write(_TENSOR_HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, code, arr.ndim, 0, *dims))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor blob; the stored dtype (float32/int8/int32) is kept."""
    raw = Path(path).read_bytes()
    if len(raw) < _TENSOR_HEADER.size:
        raise BlobFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, code, rank, _, *dims = _TENSOR_HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise BlobFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise BlobFormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= rank <= 4:
        raise BlobFormatError(f"{path}: bad rank {rank}")
    shape = tuple(dims[:rank])
    if any(d == 0 for d in shape) or any(d != 0 for d in dims[rank:]):
        raise BlobFormatError(f"{path}: inconsistent dims {dims} for rank {rank}")
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    expect = int(np.prod(shape)) * dtype.itemsize
    payload = raw[_TENSOR_HEADER.size :]
    if len(payload) != expect:
        raise BlobFormatError(
            f"{path}: payload holds {len(payload)} bytes but dims {shape} need {expect}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


# ------------------------------------------------------------- float model


def _node_to_json(node: Node) -> dict:
    d: dict = {"id": node.id, "kind": node.kind}
    if node.kind == "input":
        d["shape"] = list(node.shape)
        return d
    d["inputs"] = list(node.inputs)
    if node.kind == "conv":
        d["stride"] = node.attrs.stride
        d["padding"] = node.attrs.padding
        d["weight"] = node.weight
        d["bias"] = node.bias
    elif node.kind == "bn":
        d["gamma"] = node.bn.gamma
        d["beta"] = node.bn.beta
        d["mean"] = node.bn.mean
        d["var"] = node.bn.var
        d["eps"] = node.bn.eps
    return d


def _node_from_json(d: dict) -> Node:
    kind = d.get("kind")
    node_id = d.get("id")
    if not isinstance(node_id, str):
        raise ModelFormatError(f"node without a string id: {d!r}")
    if kind == "input":
        shape = d.get("shape")
        if not (isinstance(shape, list) and len(shape) == 3):
            raise ModelFormatError(f"input node {node_id!r} needs a 3-entry shape")
        return Node(node_id, "input", shape=tuple(int(v) for v in shape))
    inputs = tuple(d.get("inputs", ()))
    if kind == "conv":
        return Node(
            node_id,
            "conv",
            inputs=inputs,
            attrs=ConvAttrs(stride=int(d["stride"]), padding=int(d["padding"])),
            weight=d["weight"],
            bias=d.get("bias"),
        )
    if kind == "bn":
        return Node(
            node_id,
            "bn",
            inputs=inputs,
            bn=BNRefs(d["gamma"], d["beta"], d["mean"], d["var"], float(d["eps"])),
        )
    # relu/add/output (and unknown kinds, rejected by Graph validation)
    return Node(node_id, kind, inputs=inputs)


def manifest_format(path: str | Path) -> str:
    """Identify a manifest on disk: float model or quantized model."""
    fmt = _load_json(path).get("format")
    if fmt not in (FLOAT_MODEL_FORMAT, QUANT_MODEL_FORMAT):
        raise VersionError(f"{path}: unrecognized model format {fmt!r}")
    return fmt


def save_model(model: Model, manifest_path: str | Path, blob_path: str | Path) -> None:
    """Write a float model as manifest JSON plus a float32 weight blob."""
    order: list[str] = []
    for node in model.graph.nodes:
        for _, ref in _tensor_refs(node):
            if ref not in order:
                order.append(ref)
    table: dict[str, dict] = {}
    payload = bytearray()
    for name in order:
        arr = np.ascontiguousarray(model.tensors[name].astype("<f4"))
        table[name] = {
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": len(payload),
            "nbytes": arr.nbytes,
        }
        payload += arr.tobytes()
    manifest = {
        "format": FLOAT_MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "blob": Path(blob_path).name,
        "nodes": [_node_to_json(n) for n in model.graph.nodes],
        "tensors": table,
    }
    with open(blob_path, "wb") as f:
        f.write(_BLOB_HEADER.pack(FLOAT_BLOB_MAGIC, FORMAT_VERSION, 0))
        f.write(bytes(payload))
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def _load_json(path: str | Path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e


def _check_header(path: str | Path, raw: bytes, magic: bytes) -> bytes:
    if len(raw) < _BLOB_HEADER.size:
        raise BlobFormatError(f"{path}: truncated header")
    got_magic, version, _ = _BLOB_HEADER.unpack_from(raw)
    if got_magic != magic:
        raise BlobFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported blob version {version}")
    return raw[_BLOB_HEADER.size :]


def _check_format(path, manifest, expected_format):
    fmt = manifest.get("format")
    if fmt != expected_format:
        raise VersionError(f"{path}: format {fmt!r} is not {expected_format!r}")
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported manifest version {version!r}")


def load_model(manifest_path: str | Path, blob_path: str | Path | None = None) -> Model:
    """Load and fully validate a float model.

    When blob_path is omitted the blob name recorded in the manifest is
    resolved relative to the manifest's directory.
    """
    manifest = _load_json(manifest_path)
    _check_format(manifest_path, manifest, FLOAT_MODEL_FORMAT)
    nodes = manifest.get("nodes")
    if not isinstance(nodes, list) or not nodes:
        raise ModelFormatError(f"{manifest_path}: manifest has no nodes")
    if blob_path is None:
        name = manifest.get("blob")
        if not isinstance(name, str):
            raise DanglingRefError(
                f"{manifest_path}: manifest records no blob; pass the blob path explicitly"
            )
        blob_path = Path(manifest_path).parent / name
        if not blob_path.exists():
            raise DanglingRefError(f"{manifest_path}: blob {name!r} not found")
    payload = _check_header(blob_path, Path(blob_path).read_bytes(), FLOAT_BLOB_MAGIC)
    table = manifest.get("tensors", {})
    tensors: dict[str, np.ndarray] = {}
    for name, entry in table.items():
        shape = tuple(int(v) for v in entry["shape"])
        if entry.get("dtype") != "float32":
            raise ModelFormatError(f"{manifest_path}: tensor {name!r} must be float32")
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        want = int(np.prod(shape)) * 4
        if nbytes != want:
            raise BlobFormatError(
                f"{manifest_path}: tensor {name!r} dims {shape} need {want} bytes, entry says {nbytes}"
            )
        if offset < 0 or offset + nbytes > len(payload):
            raise BlobFormatError(
                f"{blob_path}: tensor {name!r} at [{offset}, {offset + nbytes}) "
                f"leaves the {len(payload)}-byte payload"
            )
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=want // 4, offset=offset).reshape(shape).copy()
    try:
        graph = Graph(tuple(_node_from_json(d) for d in nodes))
    except KeyError as e:
        raise ModelFormatError(f"{manifest_path}: node field missing: {e}") from e
    return Model(graph, tensors)


# --------------------------------------------------------- quantized model


@dataclass(frozen=True)
class QuantizedModuleRec:
    """One unified module with quantized operands and precomputed shifts."""

    label: str  # output node id in the source graph, for reports
    case: str
    attrs: ConvAttrs
    input_ref: int  # producer module index, -1 for the network input
    shortcut_ref: int | None  # same convention, only for cases c and d
    weight: QuantizedTensor
    bias: QuantizedTensor
    out: QuantParams
    input_frac_bits: int
    bias_align_shift: int
    requant_shift: int


@dataclass(frozen=True)
class QuantizedModel:
    """Everything integer inference needs, nothing else."""

    bit_width: int
    input_shape: tuple[int, int, int]
    input_params: QuantParams
    modules: tuple[QuantizedModuleRec, ...]

    def __post_init__(self) -> None:
        out_fracs: list[int] = []
        for i, m in enumerate(self.modules):
            for ref, what in ((m.input_ref, "input"), (m.shortcut_ref, "shortcut")):
                if what == "shortcut" and ref is None:
                    continue
                if not -1 <= ref < i:
                    raise ModelFormatError(
                        f"module {i} ({m.label!r}) {what} ref {ref} must point at an "
                        "earlier module or -1"
                    )
            n_x = (
                self.input_params.frac_bits
                if m.input_ref == -1
                else out_fracs[m.input_ref]
            )
            if m.input_frac_bits != n_x:
                raise ModelFormatError(
                    f"module {i} ({m.label!r}) stores input frac_bits {m.input_frac_bits} "
                    f"but its producer outputs {n_x}"
                )
            acc_frac = n_x + m.weight.params.frac_bits
            want_align = acc_frac - m.bias.params.frac_bits
            if m.bias_align_shift != want_align:
                raise ModelFormatError(
                    f"module {i} ({m.label!r}) bias_align_shift {m.bias_align_shift} "
                    f"disagrees with frac bits ({want_align})"
                )
            common = acc_frac
            if m.shortcut_ref is not None:
                sc_frac = (
                    self.input_params.frac_bits
                    if m.shortcut_ref == -1
                    else out_fracs[m.shortcut_ref]
                )
                common = max(acc_frac, sc_frac)
            if m.requant_shift != common - m.out.frac_bits:
                raise ModelFormatError(
                    f"module {i} ({m.label!r}) requant_shift {m.requant_shift} "
                    f"disagrees with frac bits ({common - m.out.frac_bits})"
                )
            if m.out.signed != (m.case in ("a", "d")):
                raise ModelFormatError(
                    f"module {i} ({m.label!r}) output signedness does not match case {m.case!r}"
                )
            out_fracs.append(m.out.frac_bits)


def _params_to_json(p: QuantParams) -> dict:
    return {"frac_bits": p.frac_bits, "bit_width": p.bit_width, "signed": p.signed}


def _params_from_json(d: dict) -> QuantParams:
    return QuantParams(int(d["frac_bits"]), int(d["bit_width"]), bool(d["signed"]))


def save_quantized(qm: QuantizedModel, json_path: str | Path) -> None:
    """Write a quantized model as JSON plus a sibling int8 blob.

    The blob file shares the JSON path's stem with an added .bin suffix
    and is recorded in the manifest, so one path names the whole model.
    """
    if qm.bit_width > 8:
        raise InvalidInputError(
            f"the int8 container cannot hold {qm.bit_width}-bit integers"
        )
    json_path = Path(json_path)
    blob_name = json_path.stem + ".bin"
    payload = bytearray()
    mods = []
    for m in qm.modules:
        entries = {}
        for role, q in (("weight", m.weight), ("bias", m.bias)):
            arr = np.ascontiguousarray(q.ints).astype("<i1")
            entries[role] = {
                "shape": list(arr.shape),
                "frac_bits": q.params.frac_bits,
                "bit_width": q.params.bit_width,
                "signed": q.params.signed,
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
            payload += arr.tobytes()
        mods.append(
            {
                "label": m.label,
                "case": m.case,
                "stride": m.attrs.stride,
                "padding": m.attrs.padding,
                "input": m.input_ref,
                "shortcut": m.shortcut_ref,
                "weight": entries["weight"],
                "bias": entries["bias"],
                "out": _params_to_json(m.out),
                "input_frac_bits": m.input_frac_bits,
                "bias_align_shift": m.bias_align_shift,
                "requant_shift": m.requant_shift,
            }
        )
    manifest = {
        "format": QUANT_MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "blob": blob_name,
        "bit_width": qm.bit_width,
        "input": {
            "shape": list(qm.input_shape),
            **_params_to_json(qm.input_params),
        },
        "modules": mods,
    }
    with open(json_path.parent / blob_name, "wb") as f:
        f.write(_BLOB_HEADER.pack(QUANT_BLOB_MAGIC, FORMAT_VERSION, 0))
        f.write(bytes(payload))
    with open(json_path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_quantized(json_path: str | Path) -> QuantizedModel:
    """Load and fully validate a quantized model (formats, ranges, shifts)."""
    json_path = Path(json_path)
    manifest = _load_json(json_path)
    _check_format(json_path, manifest, QUANT_MODEL_FORMAT)
    blob_path = json_path.parent / manifest["blob"]
    if not blob_path.exists():
        raise DanglingRefError(f"{json_path}: blob {manifest['blob']!r} not found")
    payload = _check_header(blob_path, blob_path.read_bytes(), QUANT_BLOB_MAGIC)
    bit_width = int(manifest["bit_width"])

    def read_q(entry: dict, what: str) -> QuantizedTensor:
        shape = tuple(int(v) for v in entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        want = int(np.prod(shape))
        if nbytes != want:
            raise BlobFormatError(
                f"{json_path}: {what} dims {shape} need {want} bytes, entry says {nbytes}"
            )
        if offset < 0 or offset + nbytes > len(payload):
            raise BlobFormatError(
                f"{blob_path}: {what} at [{offset}, {offset + nbytes}) leaves the payload"
            )
        ints = np.frombuffer(payload, dtype="<i1", count=want, offset=offset).reshape(shape)
        try:
            return QuantizedTensor(
                ints.astype(np.int32),
                QuantParams(int(entry["frac_bits"]), int(entry["bit_width"]), bool(entry["signed"])),
            )
        except InvalidInputError as e:
            raise BlobFormatError(f"{blob_path}: {what}: {e}") from e

    modules = []
    try:
        for i, d in enumerate(manifest["modules"]):
            modules.append(
                QuantizedModuleRec(
                    label=d["label"],
                    case=d["case"],
                    attrs=ConvAttrs(stride=int(d["stride"]), padding=int(d["padding"])),
                    input_ref=int(d["input"]),
                    shortcut_ref=None if d["shortcut"] is None else int(d["shortcut"]),
                    weight=read_q(d["weight"], f"module {i} weight"),
                    bias=read_q(d["bias"], f"module {i} bias"),
                    out=_params_from_json(d["out"]),
                    input_frac_bits=int(d["input_frac_bits"]),
                    bias_align_shift=int(d["bias_align_shift"]),
                    requant_shift=int(d["requant_shift"]),
                )
            )
        qm = QuantizedModel(
            bit_width=bit_width,
            input_shape=tuple(int(v) for v in manifest["input"]["shape"]),
            input_params=_params_from_json(manifest["input"]),
            modules=tuple(modules),
        )
    except KeyError as e:
        raise ModelFormatError(f"{json_path}: field missing: {e}") from e
    return qm
