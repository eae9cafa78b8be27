"""Network graphs, the pre-trained model zoo, and manifest I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONV = "conv"
DWCONV = "dwconv"
POOL = "pool"
LINEAR = "linear"
OP_KINDS = (CONV, DWCONV, POOL, LINEAR)


class ManifestError(ValueError):
    """Manifest file violates the schema (message names the offending field)."""


class ValidationError(ValueError):
    """Graph or weight shapes are internally inconsistent (message names the op)."""


class UnsupportedTopologyError(ValueError):
    """Structural transform requested on a node the transform cannot handle."""


@dataclass(frozen=True)
class NodeSpec:
    id: str
    rows: int
    cols: int
    channels: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.channels < 1:
            raise ValidationError(f"node {self.id}: dims must be >= 1")


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    src: str
    dst: str
    kind: str
    k: int = 1
    stride: int = 1
    padding: int = 0
    weights: np.ndarray | None = None  # [M, N, K, K]; dwconv [ch, 1, K, K]
    fixed_latency_cycles: int | None = None

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValidationError(f"op {self.src}->{self.dst}: unknown kind {self.kind!r}")
        if self.k < 1 or self.stride < 1 or self.padding < 0:
            raise ValidationError(f"op {self.src}->{self.dst}: bad k/stride/padding")
        if self.weights is not None:
            w = np.ascontiguousarray(self.weights, dtype=np.float32)
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    @property
    def is_conv(self) -> bool:
        return self.kind in (CONV, DWCONV)


def out_dim(in_dim: int, k: int, stride: int, padding: int) -> int:
    return (in_dim + 2 * padding - k) // stride + 1


@dataclass(frozen=True, eq=False)
class NetworkArch:
    """A feature-map graph. Immutable; transforms return new instances."""

    name: str
    nodes: tuple[NodeSpec, ...]
    ops: tuple[OperatorSpec, ...]
    baseline_accuracy: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "ops", tuple(self.ops))
        self._validate()

    def _validate(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"{self.name}: duplicate node ids")
        by_id = {n.id: n for n in self.nodes}
        produced = set()
        for op in self.ops:
            produced.add(op.dst)
        # ops must be listed in a valid topological order: every src is either a
        # graph input (never produced) or the dst of an earlier op
        seen = set()
        for i, op in enumerate(self.ops):
            tag = f"{self.name} op[{i}] {op.src}->{op.dst}"
            if op.src not in by_id or op.dst not in by_id:
                raise ValidationError(f"{tag}: references unknown node")
            if op.src == op.dst:
                raise ValidationError(f"{tag}: self loop")
            if op.src in produced and op.src not in seen:
                raise ValidationError(f"{tag}: ops not in topological order")
            seen.add(op.dst)
            src, dst = by_id[op.src], by_id[op.dst]
            self._check_op(op, src, dst, tag)

    @staticmethod
    def _check_op(op: OperatorSpec, src: NodeSpec, dst: NodeSpec, tag: str):
        if op.kind in (CONV, DWCONV, POOL):
            r = out_dim(src.rows, op.k, op.stride, op.padding)
            c = out_dim(src.cols, op.k, op.stride, op.padding)
            if (r, c) != (dst.rows, dst.cols):
                raise ValidationError(
                    f"{tag}: output dims {dst.rows}x{dst.cols} inconsistent with "
                    f"input {src.rows}x{src.cols}, k={op.k}, stride={op.stride}, "
                    f"padding={op.padding} (expected {r}x{c})"
                )
        if op.kind == CONV:
            if op.weights is None:
                raise ValidationError(f"{tag}: conv requires weights")
            want = (dst.channels, src.channels, op.k, op.k)
            if op.weights.shape != want:
                raise ValidationError(
                    f"{tag}: weight shape {op.weights.shape} != expected {want}"
                )
        elif op.kind == DWCONV:
            if src.channels != dst.channels:
                raise ValidationError(f"{tag}: dwconv requires equal channels")
            if op.weights is None:
                raise ValidationError(f"{tag}: dwconv requires weights")
            want = (dst.channels, 1, op.k, op.k)
            if op.weights.shape != want:
                raise ValidationError(
                    f"{tag}: weight shape {op.weights.shape} != expected {want}"
                )
        elif op.kind == POOL:
            if src.channels != dst.channels:
                raise ValidationError(f"{tag}: pool must preserve channels")
            if op.weights is not None:
                raise ValidationError(f"{tag}: pool carries no weights")

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def conv_ops(self) -> list[tuple[int, OperatorSpec]]:
        """Indices and ops of the layers the latency model covers."""
        return [(i, op) for i, op in enumerate(self.ops) if op.is_conv]

    def producers(self, node_id: str) -> list[int]:
        return [i for i, op in enumerate(self.ops) if op.dst == node_id]

    def consumers(self, node_id: str) -> list[int]:
        return [i for i, op in enumerate(self.ops) if op.src == node_id]

    def layer_dims(self, op_index: int) -> tuple[int, int, int, int, int]:
        """(M, N, R, C, K) of a convolution op: OFM channels, IFM channels,
        output rows/cols, filter size."""
        op = self.ops[op_index]
        src, dst = self.node(op.src), self.node(op.dst)
        return dst.channels, src.channels, dst.rows, dst.cols, op.k

    def replace_ops(self, new_ops: dict[int, OperatorSpec], name: str | None = None,
                    new_nodes: dict[str, NodeSpec] | None = None) -> "NetworkArch":
        ops = [new_ops.get(i, op) for i, op in enumerate(self.ops)]
        nodes = self.nodes
        if new_nodes:
            nodes = [new_nodes.get(n.id, n) for n in self.nodes]
        return NetworkArch(name or self.name, tuple(nodes), tuple(ops),
                           self.baseline_accuracy)

    def weight_count(self) -> int:
        return sum(int(op.weights.size) for op in self.ops if op.weights is not None)


@dataclass(frozen=True)
class ModelZoo:
    models: tuple[NetworkArch, ...]

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValidationError("zoo: duplicate model names")

    def get(self, name: str) -> NetworkArch:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)


# ---------------------------------------------------------------------------
# manifest I/O
#
# Zoo file: {"models": [model, ...]}
# Model: {"name": str, "baseline_accuracy": float,
#         "nodes": [{"id","rows","cols","channels"}],
#         "ops": [{"src","dst","kind","k","stride","padding",
#                  "weights": path|null, "fixed_latency_cycles": int|null}]}
# Weight blobs are little-endian float32, row-major [M][N][K][K], path
# relative to the manifest file.
# ---------------------------------------------------------------------------

def _require(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise ManifestError(f"{ctx}: missing field {key!r}")
    return obj[key]


def _load_weights(path: Path, ctx: str) -> np.ndarray:
    if not path.exists():
        raise ManifestError(f"{ctx}: weights file {path} not found")
    flat = np.fromfile(path, dtype="<f4")
    return flat  # reshaped during shape resolution below


def serialize_manifest(zoo: ModelZoo, out_dir: str | Path,
                       filename: str = "zoo.json") -> Path:
    """Write a zoo back out as manifest JSON + weight blobs; inverse of
    parse_manifest up to float32 weight precision."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "weights").mkdir(exist_ok=True)
    doc = {"models": []}
    for m in zoo.models:
        ops_doc = []
        for i, op in enumerate(m.ops):
            wrel = None
            if op.weights is not None:
                wrel = f"weights/{m.name}_op{i}.bin"
                op.weights.astype("<f4").tofile(out_dir / wrel)
            ops_doc.append({
                "src": op.src, "dst": op.dst, "kind": op.kind,
                "k": op.k, "stride": op.stride, "padding": op.padding,
                "weights": wrel,
                "fixed_latency_cycles": op.fixed_latency_cycles,
            })
        doc["models"].append({
            "name": m.name,
            "baseline_accuracy": m.baseline_accuracy,
            "nodes": [{"id": n.id, "rows": n.rows, "cols": n.cols,
                       "channels": n.channels} for n in m.nodes],
            "ops": ops_doc,
        })
    out = out_dir / filename
    out.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return out


def parse_manifest(path: str | Path) -> ModelZoo:
    """Load and validate a model-zoo manifest.

    Raises ManifestError on schema problems (message names the field) and
    ValidationError on shape inconsistencies (message names the op). Weight
    blobs are read flat and reshaped against the declared node dims, so a
    wrong-sized blob is reported as a shape inconsistency.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object with 'models'")
    models_doc = _require(doc, "models", str(path))
    if not isinstance(models_doc, list):
        raise ManifestError(f"{path}: 'models' must be a list")
    models = []
    for mi, mdoc in enumerate(models_doc):
        mctx = f"models[{mi}]"
        name = str(_require(mdoc, "name", mctx))
        acc = float(_require(mdoc, "baseline_accuracy", mctx))
        nodes = {}
        node_list = []
        for ni, nd in enumerate(_require(mdoc, "nodes", mctx)):
            nctx = f"{mctx}.nodes[{ni}]"
            node = NodeSpec(
                id=str(_require(nd, "id", nctx)),
                rows=int(_require(nd, "rows", nctx)),
                cols=int(_require(nd, "cols", nctx)),
                channels=int(_require(nd, "channels", nctx)),
            )
            nodes[node.id] = node
            node_list.append(node)
        ops = []
        for oi, od in enumerate(_require(mdoc, "ops", mctx)):
            octx = f"{mctx}.ops[{oi}]"
            kind = str(_require(od, "kind", octx))
            if kind not in OP_KINDS:
                raise ManifestError(f"{octx}: kind must be one of {OP_KINDS}")
            src = str(_require(od, "src", octx))
            dst = str(_require(od, "dst", octx))
            if src not in nodes or dst not in nodes:
                raise ManifestError(f"{octx}: src/dst must name declared nodes")
            k = int(od.get("k", 1))
            weights = None
            wpath = od.get("weights")
            if wpath is not None:
                flat = _load_weights(path.parent / wpath, octx)
                if kind == DWCONV:
                    shape = (nodes[dst].channels, 1, k, k)
                elif kind == LINEAR:
                    shape = (nodes[dst].channels, nodes[src].channels, 1, 1)
                else:
                    shape = (nodes[dst].channels, nodes[src].channels, k, k)
                if flat.size != int(np.prod(shape)):
                    raise ValidationError(
                        f"{octx}: weights blob has {flat.size} values, expected "
                        f"{int(np.prod(shape))} for shape {shape}"
                    )
                weights = flat.reshape(shape)
            elif kind in (CONV, DWCONV):
                raise ManifestError(f"{octx}: field 'weights' required for {kind}")
            ops.append(OperatorSpec(
                src=src, dst=dst, kind=kind, k=k,
                stride=int(od.get("stride", 1)),
                padding=int(od.get("padding", 0)),
                weights=weights,
                fixed_latency_cycles=od.get("fixed_latency_cycles"),
            ))
        models.append(NetworkArch(name, tuple(node_list), tuple(ops), acc))
    return ModelZoo(tuple(models))


# ---------------------------------------------------------------------------
# builtin networks
# ---------------------------------------------------------------------------

BUILTIN_NAMES = ("alexnet-conv", "tiny", "random")


def _fill(rng: np.random.Generator, shape) -> np.ndarray:
    # documented weight distribution for generated nets: uniform in [-1, 1]
    return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)


def _alexnet_conv() -> NetworkArch:
    # classic 5-conv feature extractor at 224x224 input; pools carried in the
    # graph but outside the latency model
    rng = np.random.default_rng(11)
    spec = [
        # (kind, k, stride, pad, out_ch)
        (CONV, 11, 4, 2, 64),
        (POOL, 3, 2, 0, 64),
        (CONV, 5, 1, 2, 192),
        (POOL, 3, 2, 0, 192),
        (CONV, 3, 1, 1, 384),
        (CONV, 3, 1, 1, 256),
        (CONV, 3, 1, 1, 256),
    ]
    nodes = [NodeSpec("in", 224, 224, 3)]
    ops = []
    r = c = 224
    ch = 3
    for i, (kind, k, s, p, out_ch) in enumerate(spec):
        r = out_dim(r, k, s, p)
        c = out_dim(c, k, s, p)
        nid = f"n{i + 1}"
        nodes.append(NodeSpec(nid, r, c, out_ch))
        w = _fill(rng, (out_ch, ch, k, k)) if kind == CONV else None
        ops.append(OperatorSpec(nodes[-2].id, nid, kind, k, s, p, w))
        ch = out_ch
    return NetworkArch("alexnet-conv", tuple(nodes), tuple(ops),
                       baseline_accuracy=0.79066)


def _tiny() -> NetworkArch:
    rng = np.random.default_rng(7)
    nodes = (
        NodeSpec("in", 8, 8, 3),
        NodeSpec("mid", 8, 8, 4),
        NodeSpec("out", 8, 8, 4),
    )
    ops = (
        OperatorSpec("in", "mid", CONV, 3, 1, 1, _fill(rng, (4, 3, 3, 3))),
        OperatorSpec("mid", "out", CONV, 3, 1, 1, _fill(rng, (4, 4, 3, 3))),
    )
    return NetworkArch("tiny", nodes, ops, baseline_accuracy=0.9)


def _random_net(seed: int, depth: int) -> NetworkArch:
    rng = np.random.default_rng(seed)
    r = c = int(rng.integers(8, 17))
    ch = int(rng.integers(2, 7))
    nodes = [NodeSpec("in", r, c, ch)]
    ops = []
    for i in range(depth):
        k = int(rng.choice([1, 3, 5]))
        out_ch = int(rng.integers(2, 7))
        nid = f"n{i + 1}"
        nodes.append(NodeSpec(nid, r, c, out_ch))
        w = _fill(rng, (out_ch, ch, k, k))
        ops.append(OperatorSpec(nodes[-2].id, nid, CONV, k, 1, k // 2, w))
        ch = out_ch
    return NetworkArch(f"random-s{seed}-d{depth}", tuple(nodes), tuple(ops),
                       baseline_accuracy=0.85)


def builtin_network(name: str, seed: int = 0, depth: int = 3) -> NetworkArch:
    """Deterministic reference networks: 'alexnet-conv', 'tiny', or 'random'
    (seeded chain of convs)."""
    if name == "alexnet-conv":
        return _alexnet_conv()
    if name == "tiny":
        return _tiny()
    if name == "random":
        return _random_net(seed, depth)
    raise KeyError(f"unknown builtin network {name!r}; have {BUILTIN_NAMES}")


def builtin_zoo() -> ModelZoo:
    return ModelZoo((
        _alexnet_conv(),
        _tiny(),
        _random_net(1, 3),
    ))


# ---------------------------------------------------------------------------
# channel reordering (function-preserving)
# ---------------------------------------------------------------------------

def reorder_input_channels(net: NetworkArch, op_index: int,
                           permutation: list[int]) -> NetworkArch:
    """Permute the input channels of ops[op_index], pushing the matching
    permutation onto the producing op's output filters so the end-to-end
    function is unchanged.

    Only plain conv producer/consumer chains are supported; a node with other
    consumers or a non-conv producer raises UnsupportedTopologyError.
    """
    op = net.ops[op_index]
    if op.kind != CONV:
        raise UnsupportedTopologyError(
            f"reorder: op[{op_index}] is {op.kind}, only conv consumers supported")
    n = net.node(op.src).channels
    perm = list(permutation)
    if sorted(perm) != list(range(n)):
        raise ValidationError(
            f"reorder: permutation must be a bijection on {n} channels")
    producers = net.producers(op.src)
    if len(producers) != 1:
        raise UnsupportedTopologyError(
            f"reorder: node {op.src} has {len(producers)} producers, need exactly 1")
    consumers = net.consumers(op.src)
    if consumers != [op_index]:
        raise UnsupportedTopologyError(
            f"reorder: node {op.src} feeds {len(consumers)} consumers; refusing "
            "to propagate a permutation past a fan-out")
    prod = net.ops[producers[0]]
    if prod.kind != CONV:
        raise UnsupportedTopologyError(
            f"reorder: producer of {op.src} is {prod.kind}, only conv supported")
    perm_arr = np.asarray(perm)
    new_consumer = OperatorSpec(op.src, op.dst, op.kind, op.k, op.stride,
                                op.padding, np.ascontiguousarray(op.weights[:, perm_arr]),
                                op.fixed_latency_cycles)
    new_producer = OperatorSpec(prod.src, prod.dst, prod.kind, prod.k, prod.stride,
                                prod.padding, np.ascontiguousarray(prod.weights[perm_arr]),
                                prod.fixed_latency_cycles)
    return net.replace_ops({op_index: new_consumer, producers[0]: new_producer})
