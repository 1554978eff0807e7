"""Checkpoint -> float-model conversion with a mandatory parity check.

The export spec declares the manifest graph (same node kinds the
toolkit's manifests use) and maps every tensor slot to a checkpoint
entry. Conversion normalizes each source tensor to float32, OIHW
weight layout and little-endian bytes, writes the manifest + blob, and
then verifies the files: the same graph is run with torch functional
ops on the normalized tensors and with the toolkit's float engine via
its CLI, and the outputs must agree within 1e-4 max relative
difference. A failed check is an error, not a warning.

The exporter never changes semantics: no batch-norm folding, no
fusion, no requantization. Those belong to the toolkit, which is the
single source of truth for numerics.
"""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blobs import read_tensor, write_float_model, write_tensor
from .errors import (
    CompletenessError,
    MissingTensorError,
    ShapeMismatchError,
    SpecFormatError,
    UnknownLayoutError,
    VerificationError,
)

EXPORT_SPEC_FORMAT = "shiftquant-export-spec"
EXPORT_SPEC_VERSION = 1
REL_TOLERANCE = 1e-4

# supported conv weight orderings; everything is transposed to OIHW
_LAYOUT_AXES = {
    "OIHW": (0, 1, 2, 3),
    "OHWI": (0, 3, 1, 2),
    "HWIO": (3, 2, 0, 1),
}

_VERIFY_SEED = 20240817


@dataclass(frozen=True)
class TensorSource:
    """One checkpoint entry feeding one manifest tensor slot."""

    source: str
    layout: str = "OIHW"


@dataclass(frozen=True)
class SpecNode:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    shape: tuple[int, int, int] | None = None
    stride: int = 1
    padding: int = 0
    weight: TensorSource | None = None
    bias: TensorSource | None = None
    bn: dict[str, TensorSource] = field(default_factory=dict)
    eps: float = 1e-5


@dataclass(frozen=True)
class ExportSpec:
    """Graph declaration plus checkpoint-name mapping, parsed from JSON."""

    nodes: tuple[SpecNode, ...]

    @property
    def input_node(self) -> SpecNode:
        return next(n for n in self.nodes if n.kind == "input")


def _parse_source(node_id: str, slot: str, raw) -> TensorSource:
    if isinstance(raw, str):
        return TensorSource(raw)
    if isinstance(raw, dict) and isinstance(raw.get("source"), str):
        return TensorSource(raw["source"], raw.get("layout", "OIHW"))
    raise SpecFormatError(f"node {node_id!r}: {slot} must be a checkpoint key or {{source, layout}}")


def load_spec(path: str | Path) -> ExportSpec:
    """Parse and structurally validate an export spec file."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SpecFormatError(f"{path}: line {e.lineno}: {e.msg}") from e
    if doc.get("format") != EXPORT_SPEC_FORMAT:
        raise SpecFormatError(f"{path}: unrecognized spec format {doc.get('format')!r}")
    if doc.get("version") != EXPORT_SPEC_VERSION:
        raise SpecFormatError(f"{path}: unsupported spec version {doc.get('version')!r}")

    nodes: list[SpecNode] = []
    seen: set[str] = set()
    for d in doc.get("nodes", []):
        nid, kind = d.get("id"), d.get("kind")
        if not isinstance(nid, str) or not isinstance(kind, str):
            raise SpecFormatError(f"{path}: node without string id/kind: {d!r}")
        if nid in seen:
            raise SpecFormatError(f"{path}: duplicate node id {nid!r}")
        seen.add(nid)
        if kind == "input":
            shape = d.get("shape")
            if not (isinstance(shape, list) and len(shape) == 3):
                raise SpecFormatError(f"{path}: input node {nid!r} needs a 3-entry shape")
            nodes.append(SpecNode(nid, "input", shape=tuple(int(v) for v in shape)))
            continue
        inputs = tuple(d.get("inputs", ()))
        if kind == "conv":
            if "weight" not in d:
                raise CompletenessError(f"node {nid!r}: conv has no weight mapping")
            bias = d.get("bias")
            nodes.append(
                SpecNode(
                    nid,
                    "conv",
                    inputs=inputs,
                    stride=int(d.get("stride", 1)),
                    padding=int(d.get("padding", 0)),
                    weight=_parse_source(nid, "weight", d["weight"]),
                    bias=None if bias is None else _parse_source(nid, "bias", bias),
                )
            )
        elif kind == "bn":
            missing = [k for k in ("gamma", "beta", "mean", "var") if k not in d]
            if missing:
                raise CompletenessError(f"node {nid!r}: bn is missing {', '.join(missing)}")
            nodes.append(
                SpecNode(
                    nid,
                    "bn",
                    inputs=inputs,
                    bn={k: _parse_source(nid, k, d[k]) for k in ("gamma", "beta", "mean", "var")},
                    eps=float(d.get("eps", 1e-5)),
                )
            )
        elif kind in ("relu", "add", "output"):
            nodes.append(SpecNode(nid, kind, inputs=inputs))
        else:
            raise SpecFormatError(f"{path}: node {nid!r} has unknown kind {kind!r}")

    if not any(n.kind == "input" for n in nodes):
        raise SpecFormatError(f"{path}: no input node")
    if not any(n.kind == "output" for n in nodes):
        raise SpecFormatError(f"{path}: no output node")
    declared: set[str] = set()
    for n in nodes:
        for ref in n.inputs:
            if ref not in declared:
                raise CompletenessError(f"node {n.id!r} references {ref!r}, which is not declared above it")
        declared.add(n.id)
    return ExportSpec(tuple(nodes))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a torch checkpoint into plain numpy arrays.

    Accepts a bare state dict or the common {'state_dict': ...} wrapper;
    non-tensor entries (step counters and the like) are dropped.
    """
    import torch

    obj = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(obj, dict) and isinstance(obj.get("state_dict"), dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise SpecFormatError(f"{path}: checkpoint is not a state dict")
    return {k: v.numpy() for k, v in obj.items() if isinstance(v, torch.Tensor)}


def _fetch(ckpt: dict[str, np.ndarray], node_id: str, slot: str, src: TensorSource) -> np.ndarray:
    if src.source not in ckpt:
        raise MissingTensorError(f"node {node_id!r} {slot}: checkpoint has no tensor {src.source!r}")
    arr = np.asarray(ckpt[src.source])
    if not np.issubdtype(arr.dtype, np.floating):
        raise ShapeMismatchError(f"node {node_id!r} {slot}: {src.source!r} is not a float tensor")
    return arr.astype("<f4")


def _normalize_weight(node_id: str, src: TensorSource, arr: np.ndarray) -> np.ndarray:
    if src.layout not in _LAYOUT_AXES:
        raise UnknownLayoutError(f"node {node_id!r}: unknown weight layout {src.layout!r}")
    if arr.ndim != 4:
        raise ShapeMismatchError(f"node {node_id!r} weight: expected rank 4, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr.transpose(_LAYOUT_AXES[src.layout]))
    if arr.shape[2] != arr.shape[3]:
        raise ShapeMismatchError(f"node {node_id!r} weight: kernel must be square, got {arr.shape}")
    return arr


def collect_tensors(spec: ExportSpec, ckpt: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Resolve every tensor slot against the checkpoint, normalized.

    Returns manifest-named float32 arrays in first-reference order and
    checks shape consistency along the graph (channel counts, kernel
    squareness, parameter ranks).
    """
    tensors: dict[str, np.ndarray] = {}
    channels: dict[str, int] = {}
    for n in spec.nodes:
        if n.kind == "input":
            channels[n.id] = n.shape[0]
        elif n.kind == "conv":
            w = _normalize_weight(n.id, n.weight, _fetch(ckpt, n.id, "weight", n.weight))
            c_in = channels[n.inputs[0]]
            if w.shape[1] != c_in:
                raise ShapeMismatchError(
                    f"node {n.id!r} weight: {w.shape[1]} input channels, producer has {c_in}"
                )
            tensors[f"{n.id}.w"] = w
            if n.bias is not None:
                b = _fetch(ckpt, n.id, "bias", n.bias)
                if b.shape != (w.shape[0],):
                    raise ShapeMismatchError(
                        f"node {n.id!r} bias: shape {b.shape} does not match {w.shape[0]} filters"
                    )
                tensors[f"{n.id}.b"] = b
            channels[n.id] = w.shape[0]
        elif n.kind == "bn":
            c = channels[n.inputs[0]]
            for slot, name in (("gamma", "g"), ("beta", "be"), ("mean", "m"), ("var", "v")):
                arr = _fetch(ckpt, n.id, slot, n.bn[slot])
                if arr.shape != (c,):
                    raise ShapeMismatchError(
                        f"node {n.id!r} {slot}: shape {arr.shape} does not match {c} channels"
                    )
                tensors[f"{n.id}.{name}"] = arr
            channels[n.id] = c
        elif n.kind == "add":
            a, b = (channels[ref] for ref in n.inputs)
            if a != b:
                raise ShapeMismatchError(f"node {n.id!r}: adding {a}-channel and {b}-channel maps")
            channels[n.id] = a
        else:
            channels[n.id] = channels[n.inputs[0]]
    return tensors


def _manifest_nodes(spec: ExportSpec) -> list[dict]:
    nodes = []
    for n in spec.nodes:
        d: dict = {"id": n.id, "kind": n.kind}
        if n.kind == "input":
            d["shape"] = list(n.shape)
            nodes.append(d)
            continue
        d["inputs"] = list(n.inputs)
        if n.kind == "conv":
            d["stride"] = n.stride
            d["padding"] = n.padding
            d["weight"] = f"{n.id}.w"
            d["bias"] = f"{n.id}.b" if n.bias is not None else None
        elif n.kind == "bn":
            d["gamma"] = f"{n.id}.g"
            d["beta"] = f"{n.id}.be"
            d["mean"] = f"{n.id}.m"
            d["var"] = f"{n.id}.v"
            d["eps"] = n.eps
        nodes.append(d)
    return nodes


def run_torch(spec: ExportSpec, tensors: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Execute the declared graph with torch functional ops (the source
    framework's arithmetic), as the reference side of the parity check."""
    import torch
    import torch.nn.functional as F

    t = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in tensors.items()}
    vals: dict[str, torch.Tensor] = {}
    out = None
    with torch.no_grad():
        for n in spec.nodes:
            if n.kind == "input":
                vals[n.id] = torch.from_numpy(np.ascontiguousarray(x))
            elif n.kind == "conv":
                bias = t[f"{n.id}.b"] if n.bias is not None else None
                vals[n.id] = F.conv2d(
                    vals[n.inputs[0]], t[f"{n.id}.w"], bias, stride=n.stride, padding=n.padding
                )
            elif n.kind == "bn":
                vals[n.id] = F.batch_norm(
                    vals[n.inputs[0]],
                    t[f"{n.id}.m"],
                    t[f"{n.id}.v"],
                    weight=t[f"{n.id}.g"],
                    bias=t[f"{n.id}.be"],
                    training=False,
                    eps=n.eps,
                )
            elif n.kind == "relu":
                vals[n.id] = torch.relu(vals[n.inputs[0]])
            elif n.kind == "add":
                vals[n.id] = vals[n.inputs[0]] + vals[n.inputs[1]]
            else:
                out = vals[n.inputs[0]]
    return out.numpy()


def verify_export(
    spec: ExportSpec, tensors: dict[str, np.ndarray], manifest_path: str | Path
) -> float:
    """Cross-framework parity gate; returns the max relative difference.

    Runs torch on the normalized tensors and the toolkit's float engine
    on the exported files (via its CLI, one random input) and raises
    VerificationError unless they agree within 1e-4.
    """
    c, h, w = spec.input_node.shape
    rng = np.random.default_rng(_VERIFY_SEED)
    x = rng.standard_normal((1, c, h, w)).astype(np.float32)
    ref = run_torch(spec, tensors, x)

    with tempfile.TemporaryDirectory() as td:
        x_path = Path(td) / "x.bin"
        out_path = Path(td) / "out.bin"
        write_tensor(x_path, x)
        cmd = [
            sys.executable, "-m", "shiftquant", "infer",
            "--model", str(manifest_path), "--input", str(x_path),
            "--out", str(out_path), "--engine", "float",
        ]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise VerificationError(
                f"toolkit float engine failed on the exported files: {proc.stderr.strip()}"
            )
        got = read_tensor(out_path)

    if got.shape != ref.shape:
        raise VerificationError(f"output shapes differ: toolkit {got.shape}, torch {ref.shape}")
    denom = max(float(np.abs(ref).max()), 1e-12)
    rel = float(np.abs(got.astype(np.float64) - ref.astype(np.float64)).max() / denom)
    if not rel < REL_TOLERANCE:
        raise VerificationError(
            f"cross-framework outputs differ: max relative difference {rel:.3g} >= {REL_TOLERANCE:g}"
        )
    return rel


@dataclass(frozen=True)
class ExportResult:
    manifest_path: Path
    blob_path: Path
    node_count: int
    tensor_count: int
    payload_bytes: int
    max_rel_diff: float


def export(ckpt_path: str | Path, spec_path: str | Path, out_dir: str | Path) -> ExportResult:
    """Convert a checkpoint and verify the result; files land in out_dir.

    Writes fmodel.json and fmodel.bin. The verification pass is part of
    the operation: if the exported files do not reproduce the source
    framework's outputs, the export fails.
    """
    spec = load_spec(spec_path)
    ckpt = load_checkpoint(ckpt_path)
    tensors = collect_tensors(spec, ckpt)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "fmodel.json"
    blob_path = out_dir / "fmodel.bin"
    payload = write_float_model(manifest_path, blob_path, _manifest_nodes(spec), tensors)

    rel = verify_export(spec, tensors, manifest_path)
    return ExportResult(manifest_path, blob_path, len(spec.nodes), len(tensors), payload, rel)
