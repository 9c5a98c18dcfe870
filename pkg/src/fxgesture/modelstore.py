"""``.fxrn`` model files and embedded cost accounting.

File layout (all integers little-endian)::

    magic "FXRN" | version u16 | kind u8 (0 float, 1 packed) | reserved u8
    graph JSON (u32 length + utf-8) | rng seed i64
    weight group count u16, then per group sorted by name:
        name | bits u8 | delta f32 | array count u8
        per array: name | ndim u8 | dims u32...
        value count u32 | payload length u32 | payload
    signal spec count u16, then per group sorted by name:
        name | kind u8 | bits u8 | delta f32

Strings are u16 length + utf-8.  A packed payload holds offset-encoded
level codes (see :func:`fxgesture.quantizer.pack_codes`); a float payload
holds float64 values.  ``bits == 0`` marks a group without a quantizer.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .netcore import MasterModel, NetworkGraph
from .quantizer import (KINDS, QuantSpec, as_float32, pack_codes, packed_size,
                        quantize_codes, unpack_codes)

MAGIC = b"FXRN"
VERSION = 1
FLOAT, PACKED = 0, 1


class ModelFormatError(ValueError):
    pass


# encoding

def _str(buf, s):
    b = s.encode()
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _encode(model, kind):
    graph = model.graph
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBB", VERSION, kind, 0))
    gj = graph.to_json().encode()
    buf.write(struct.pack("<I", len(gj)))
    buf.write(gj)
    buf.write(struct.pack("<q", model.rng_seed))
    groups = sorted(graph.weight_groups())
    if kind == PACKED:
        missing = [g for g in groups if g not in model.weight_specs]
        if missing:
            raise ValueError(f"cannot pack: no QuantSpec for weight groups {missing}")
    buf.write(struct.pack("<H", len(groups)))
    shapes = graph.param_shapes()
    for g in groups:
        spec = model.weight_specs.get(g)
        keys = sorted(graph.group_param_keys(g))
        _str(buf, g)
        bits = spec.bits if spec else 0
        delta = as_float32(spec.delta) if spec else 0.0
        if spec and delta != spec.delta:
            raise ValueError(f"{g}: step size {spec.delta!r} is not float32-exact")
        buf.write(struct.pack("<Bf", bits, delta))
        buf.write(struct.pack("<B", len(keys)))
        for k in keys:
            _str(buf, k.split("/", 1)[1])
            buf.write(struct.pack("<B", len(shapes[k])))
            buf.write(struct.pack(f"<{len(shapes[k])}I", *shapes[k]))
        values = np.concatenate([model.params[k].ravel() for k in keys])
        if kind == PACKED:
            payload = pack_codes(quantize_codes(values, spec) + spec.offset, bits)
        else:
            payload = values.astype("<f8").tobytes()
        buf.write(struct.pack("<II", values.size, len(payload)))
        buf.write(payload)
    sig = sorted(model.signal_specs.items())
    buf.write(struct.pack("<H", len(sig)))
    for name, spec in sig:
        _str(buf, name)
        buf.write(struct.pack("<BBf", KINDS.index(spec.kind), spec.bits,
                              as_float32(spec.delta)))
    return buf.getvalue()


def save_packed(model):
    """Bytes of the packed fixed-point model (every weight group needs a spec)."""
    return _encode(model, PACKED)


def save_float(model):
    """Bytes of the full-precision master model plus any attached specs."""
    return _encode(model, FLOAT)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(bytes(data))
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ModelFormatError("truncated model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        return bytes(self.take(n)).decode()


def load_model(data):
    """Decode either file kind into a :class:`MasterModel`.

    A packed file decodes to its quantized view: params hold level * delta.
    """
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise ModelFormatError("bad magic; not an FXRN file")
    version, kind, _ = r.unpack("<HBB")
    if version != VERSION:
        raise ModelFormatError(f"unsupported FXRN version {version}")
    if kind not in (FLOAT, PACKED):
        raise ModelFormatError(f"unknown model kind {kind}")
    (glen,) = r.unpack("<I")
    graph = NetworkGraph.from_dict(json.loads(bytes(r.take(glen)).decode()))
    (seed,) = r.unpack("<q")
    shapes = graph.param_shapes()
    params, wspecs = {}, {}
    (ngroups,) = r.unpack("<H")
    for _ in range(ngroups):
        g = r.string()
        bits, delta = r.unpack("<Bf")
        (narr,) = r.unpack("<B")
        layout = []
        for _ in range(narr):
            name = r.string()
            (ndim,) = r.unpack("<B")
            dims = r.unpack(f"<{ndim}I")
            key = f"{g}/{name}"
            if shapes.get(key) != tuple(dims):
                raise ModelFormatError(f"{key}: stored shape {dims} disagrees with graph")
            layout.append((key, tuple(dims)))
        count, nbytes = r.unpack("<II")
        payload = r.take(nbytes)
        if count != sum(int(np.prod(s)) for _, s in layout):
            raise ModelFormatError(f"{g}: value count {count} disagrees with shapes")
        spec = QuantSpec(g, bits, float(delta)) if bits else None
        if kind == PACKED:
            if spec is None:
                raise ModelFormatError(f"{g}: packed group without bits")
            if nbytes != packed_size(count, bits):
                raise ModelFormatError(f"{g}: payload length {nbytes} != {packed_size(count, bits)}")
            codes = unpack_codes(payload, bits, count) - spec.offset
            lo, hi = spec.code_range
            if codes.min(initial=0) < lo or codes.max(initial=0) > hi:
                raise ModelFormatError(f"{g}: code outside the {bits}-bit grid")
            values = codes.astype(np.float64) * spec.delta
        else:
            if nbytes != 8 * count:
                raise ModelFormatError(f"{g}: float payload length mismatch")
            values = np.frombuffer(bytes(payload), dtype="<f8").astype(np.float64)
        if spec is not None:
            wspecs[g] = spec
        at = 0
        for key, s in layout:
            n = int(np.prod(s))
            params[key] = values[at:at + n].reshape(s).copy()
            at += n
    (nsig,) = r.unpack("<H")
    sspecs = {}
    for _ in range(nsig):
        name = r.string()
        kidx, bits, delta = r.unpack("<BBf")
        if kidx >= len(KINDS):
            raise ModelFormatError(f"{name}: unknown quantizer kind {kidx}")
        sspecs[name] = QuantSpec(name, bits, float(delta), KINDS[kidx])
    if r.pos != len(r.data):
        raise ModelFormatError("trailing bytes after model")
    if set(params) != set(shapes):
        raise ModelFormatError("model file is missing weight groups")
    model = MasterModel(graph, params, wspecs, sspecs, seed)
    model.check()
    return model


load_packed = load_model


def write_model(model, path, packed=False):
    data = save_packed(model) if packed else save_float(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_model(path):
    with open(path, "rb") as fh:
        return load_model(fh.read())


# accounting

def float32_bytes(count):
    return 4 * count


def payload_bytes(counts_bits):
    """Sum of ceil(count * bits / 8) over ``(count, bits)`` pairs."""
    return sum(packed_size(c, b) for c, b in counts_bits)


def memory_footprint(model, fmt="float32", bits=None):
    """Weight memory in bytes; the packed figure excludes the file header.

    ``model`` may be a MasterModel or a NetworkGraph.  Packed bit widths
    come from ``bits`` (int or per-group dict) or the model's weight specs.
    """
    graph = model if isinstance(model, NetworkGraph) else model.graph
    groups = graph.weight_groups()
    if fmt == "float32":
        return float32_bytes(sum(graph.group_size(g) for g in groups))
    if fmt != "packed":
        raise ValueError(f"unknown format {fmt!r}")
    if bits is None:
        bits = {g: s.bits for g, s in model.weight_specs.items()}
    if isinstance(bits, int):
        bits = {g: bits for g in groups}
    missing = [g for g in groups if g not in bits]
    if missing:
        raise ValueError(f"no bit width for weight groups {missing}")
    return payload_bytes((graph.group_size(g), bits[g]) for g in groups)


def header_bytes(model):
    return len(save_packed(model)) - memory_footprint(model, "packed")


@dataclass
class LayerCost:
    name: str
    kind: str
    mults_per_frame: int
    note: str = ""


@dataclass
class CostReport:
    graph_name: str
    frame_rate: float
    layers: list
    lstm_peephole_per_frame: int = 0
    lstm_recurrent_only_per_frame: int = 0
    float_bytes: int = 0
    packed_bytes: int | None = None
    extra: dict = field(default_factory=dict)

    def per_second(self, name):
        layer = next(l for l in self.layers if l.name == name)
        return layer.mults_per_frame * self.frame_rate

    @property
    def total_per_frame(self):
        return sum(l.mults_per_frame for l in self.layers)

    @property
    def total_per_second(self):
        return self.total_per_frame * self.frame_rate

    @property
    def total_with_peephole_per_second(self):
        return (self.total_per_frame + self.lstm_peephole_per_frame) * self.frame_rate

    @property
    def savings(self):
        if self.packed_bytes is None or not self.float_bytes:
            return None
        return 1.0 - self.packed_bytes / self.float_bytes

    def rows(self):
        out = [(l.name, l.kind, l.mults_per_frame, l.mults_per_frame * self.frame_rate, l.note)
               for l in self.layers]
        out.append(("total", "", self.total_per_frame, self.total_per_second, ""))
        if self.lstm_peephole_per_frame:
            out.append(("L1-peephole", "lstm", self.lstm_peephole_per_frame,
                        self.lstm_peephole_per_frame * self.frame_rate,
                        "elementwise peephole products, outside the totals"))
        if self.lstm_recurrent_only_per_frame:
            out.append(("L1-4N^2", "lstm", self.lstm_recurrent_only_per_frame,
                        self.lstm_recurrent_only_per_frame * self.frame_rate,
                        "recurrent products only, without the 4NM input terms"))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "kind", "mults_per_frame", "mults_per_second", "note"])
            for row in self.rows():
                w.writerow([row[0], row[1], row[2], _num(row[3]), row[4]])
            w.writerow(["float32_bytes", "", self.float_bytes, "", ""])
            if self.packed_bytes is not None:
                w.writerow(["packed_bytes", "", self.packed_bytes, "", ""])

    def as_text(self):
        lines = [f"{self.graph_name} at {_num(self.frame_rate)} Hz",
                 f"{'layer':<12}{'mult/frame':>14}{'mult/s':>16}  note"]
        for name, _, pf, ps, note in self.rows():
            lines.append(f"{name:<12}{pf:>14,}{_si(ps):>16}  {note}")
        lines.append(f"weights float32: {self.float_bytes:,} B")
        if self.packed_bytes is not None:
            lines.append(f"weights packed:  {self.packed_bytes:,} B "
                         f"(saving {100 * self.savings:.2f}%)")
        return "\n".join(lines)


def _num(x):
    return int(x) if float(x).is_integer() else x


def _si(x):
    for div, suffix in ((1e6, " M"), (1e3, " K")):
        if x >= div:
            return f"{x / div:.6g}{suffix}"
    return f"{_num(x)}"


def multiplication_count(model, frame_rate=30.0, bits=None):
    """Per-layer multiply counts for one frame and per second at ``frame_rate``.

    conv: maps_out * H_out * W_out * k^2 * maps_in; dense: inputs * outputs;
    lstm: 4N^2 + 4NM (peephole 3N and the 4N^2-only figure reported apart).
    """
    graph = model if isinstance(model, NetworkGraph) else model.graph
    shapes = graph.shapes()
    layers = []
    peep = rec = 0
    conv_i = 0
    for layer, out in zip(graph.layers, shapes):
        if layer.kind == "conv2d":
            conv_i += 1
            m = out[0] * out[1] * out[2] * layer.kernel ** 2 * layer.inputs
            layers.append(LayerCost(f"C{conv_i}", "conv2d", m))
        elif layer.kind == "lstm":
            n, mi = layer.units, layer.inputs
            layers.append(LayerCost("L1", "lstm", 4 * n * n + 4 * n * mi,
                                    "4N^2 + 4NM"))
            peep, rec = 3 * n, 4 * n * n
        elif layer.kind == "dense":
            layers.append(LayerCost("Out", "dense", layer.units * layer.inputs))
    packed = None
    if bits is not None or (isinstance(model, MasterModel) and
                            set(model.weight_specs) >= set(graph.weight_groups())):
        packed = memory_footprint(model, "packed", bits)
    return CostReport(graph.name, frame_rate, layers, peep, rec,
                      memory_footprint(graph, "float32"), packed)


def cache_fit(report, cache_bytes):
    """True when the packed weights (or a raw byte count) fit in the cache."""
    if isinstance(report, CostReport):
        size = report.packed_bytes if report.packed_bytes is not None else report.float_bytes
    else:
        size = int(report)
    return size <= cache_bytes
