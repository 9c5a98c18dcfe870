"""Layerwise sensitivity sweeps, full quantization and greedy bit escalation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

from . import modelstore
from .trainer import RetrainPlan, TrainConfig, attach_specs, evaluate, retrain_quantized

log = logging.getLogger(__name__)

WEIGHT, SIGNAL, ALL = "weight", "signal", "all"
SENSITIVITY_EPOCHS = 20


@dataclass
class SensitivityRow:
    group: str
    kind: str
    bits: int
    direct_miss: float
    retrained_miss: float | None = None


@dataclass
class SensitivityReport:
    baseline_float_miss: float
    rows: list = field(default_factory=list)
    seed: int = 0
    dataset_id: str = ""

    def groups(self, kind):
        seen = []
        for r in self.rows:
            if r.kind == kind and r.group not in seen:
                seen.append(r.group)
        return seen

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "kind", "bits", "direct_miss", "retrained_miss"])
            w.writerow(["float", "baseline", "", f"{self.baseline_float_miss:.2f}", ""])
            for r in self.rows:
                w.writerow([r.group, r.kind, r.bits, f"{r.direct_miss:.2f}",
                            "" if r.retrained_miss is None else f"{r.retrained_miss:.2f}"])

    def as_text(self):
        """Tables laid out group-by-column, one D and one R row per bit width."""
        out = [f"dataset {self.dataset_id or '?'}  seed {self.seed}  "
               f"float miss {self.baseline_float_miss:.2f}%"]
        bits_seen = sorted({r.bits for r in self.rows})
        for kind in (WEIGHT, SIGNAL):
            cols = self.groups(kind)
            if kind == SIGNAL:
                cols += self.groups(ALL)
            if not cols:
                continue
            width = max(8, max(len(c) for c in cols) + 2)
            out.append("")
            out.append(f"{kind.upper():<10}" + "".join(f"{c:>{width}}" for c in cols))
            for bits in bits_seen:
                cells = {(r.group, r.kind if r.kind != ALL else SIGNAL): r
                         for r in self.rows if r.bits == bits}
                for label, attr in (("D", "direct_miss"), ("R", "retrained_miss")):
                    vals = []
                    for c in cols:
                        r = cells.get((c, kind))
                        v = None if r is None else getattr(r, attr)
                        vals.append("-" if v is None else f"{v:.2f}")
                    if label == "R" and all(v == "-" for v in vals):
                        continue
                    out.append(f"{label + f'({bits}b)':<10}" + "".join(f"{v:>{width}}" for v in vals))
        return "\n".join(out)


@dataclass
class BitAllocation:
    weights: dict = field(default_factory=dict)
    signals: dict = field(default_factory=dict)
    miss: float | None = None
    packed_bytes: int | None = None

    @classmethod
    def uniform(cls, graph, bits, signal_bits=None):
        sb = bits if signal_bits is None else signal_bits
        return cls({g: bits for g in graph.weight_groups()},
                   {g: sb for g in graph.signal_groups()})

    def missing(self, graph):
        return ([f"w:{g}" for g in graph.weight_groups() if g not in self.weights] +
                [f"s:{g}" for g in graph.signal_groups() if g not in self.signals])

    def keys(self):
        return [(WEIGHT, g) for g in self.weights] + [(SIGNAL, g) for g in self.signals]

    def get(self, key):
        kind, g = key
        return (self.weights if kind == WEIGHT else self.signals)[g]

    def bumped(self, key):
        out = BitAllocation(dict(self.weights), dict(self.signals))
        kind, g = key
        (out.weights if kind == WEIGHT else out.signals)[g] += 1
        return out

    def __str__(self):
        return format_allocation(self)


def format_allocation(alloc):
    parts = [f"w:{g}={b}" for g, b in alloc.weights.items()]
    parts += [f"s:{g}={b}" for g, b in alloc.signals.items()]
    return ",".join(parts)


def parse_allocation(text, graph):
    """Parse ``"w:In-L1=2,s:L1=4"``.  ``all=B``, ``w:*=B`` and ``s:*=B``
    set every group of that kind; later entries override earlier ones."""
    alloc = BitAllocation()
    wg, sg = graph.weight_groups(), list(graph.signal_groups())
    for item in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in item:
            raise ValueError(f"bad allocation entry {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        bits = int(val)
        if bits < 2:
            raise ValueError(f"{key}: bits must be >= 2")
        if key == "all":
            alloc.weights.update({g: bits for g in wg})
            alloc.signals.update({g: bits for g in sg})
            continue
        prefix, _, name = key.partition(":")
        if prefix not in ("w", "s") or not name:
            raise ValueError(f"allocation key {key!r} must look like w:<group> or s:<group>")
        target, known = (alloc.weights, wg) if prefix == "w" else (alloc.signals, sg)
        if name == "*":
            target.update({g: bits for g in known})
        elif name in known:
            target[name] = bits
        else:
            raise KeyError(f"unknown {'weight' if prefix == 'w' else 'signal'} group {name!r}")
    return alloc


def _single(kind, group, bits):
    return ({group: bits}, {}) if kind == WEIGHT else ({}, {group: bits})


def _check_group(model, kind, group):
    known = model.graph.weight_groups() if kind == WEIGHT else model.graph.signal_groups()
    if group not in known:
        raise KeyError(f"unknown {kind} group {group!r}")


def direct_sensitivity(model, group, bits, split, kind=WEIGHT):
    """Test miss rate with only ``group`` quantized, everything else float."""
    _check_group(model, kind, group)
    w, s = _single(kind, group, bits)
    q = attach_specs(model, w, s, split.train, model.rng_seed)
    return evaluate(q, split.test, "quantized")


def retrain_sensitivity(model, group, bits, split, config=None, kind=WEIGHT,
                        epochs=SENSITIVITY_EPOCHS):
    """As :func:`direct_sensitivity`, after retraining with that group quantized."""
    _check_group(model, kind, group)
    w, s = _single(kind, group, bits)
    plan = RetrainPlan(w, s, epochs, config or TrainConfig())
    return retrain_quantized(model, plan, split).test_miss


def sensitivity_table(model, split, bits_list=(2,), config=None, retrain=True,
                      epochs=SENSITIVITY_EPOCHS, include_all=True, dataset_id=""):
    """One row per weight group and signal group (plus the joint "All" row)
    for every bit width."""
    config = config or TrainConfig()
    report = SensitivityReport(evaluate(model, split.test, "float"), seed=config.seed,
                               dataset_id=dataset_id)
    g = model.graph
    for bits in bits_list:
        todo = [(WEIGHT, n) for n in g.weight_groups()] + \
               [(SIGNAL, n) for n in g.signal_groups()]
        for kind, name in todo:
            d = direct_sensitivity(model, name, bits, split, kind)
            r = retrain_sensitivity(model, name, bits, split, config, kind, epochs) \
                if retrain else None
            log.info("%s %s %db: direct %.2f retrained %s", kind, name, bits, d, r)
            report.rows.append(SensitivityRow(name, kind, bits, d, r))
        if include_all:
            alloc = BitAllocation.uniform(g, bits)
            d = evaluate(_attach(model, alloc, split), split.test, "quantized")
            r = None
            if retrain:
                r = full_quantization(model, alloc, split, config, epochs).miss
            report.rows.append(SensitivityRow("All", ALL, bits, d, r))
    return report


def _attach(model, alloc, split):
    return attach_specs(model, alloc.weights, alloc.signals, split.train, model.rng_seed)


@dataclass
class QuantizationReport:
    allocation: BitAllocation
    float_miss: float
    direct_miss: float
    miss: float
    packed_bytes: int
    float_bytes: int
    header_bytes: int
    cost: modelstore.CostReport
    model: object = None

    @property
    def savings(self):
        return 1.0 - self.packed_bytes / self.float_bytes

    def summary(self):
        return "\n".join([
            f"allocation: {format_allocation(self.allocation)}",
            f"float miss: {self.float_miss:.2f}%",
            f"direct miss: {self.direct_miss:.2f}%",
            f"quantized miss: {self.miss:.2f}%",
            f"weights float32: {self.float_bytes} B",
            f"weights packed: {self.packed_bytes} B (+{self.header_bytes} B header)",
            f"savings: {100 * self.savings:.2f}%",
        ])


def full_quantization(model, allocation, split, config=None, epochs=SENSITIVITY_EPOCHS,
                      retrain=True, frame_rate=30.0):
    """Quantize every group at its allocated width and (optionally) retrain
    jointly.  The quantized model travels on ``report.model``."""
    missing = allocation.missing(model.graph)
    if missing:
        raise ValueError(f"allocation does not cover groups {missing}")
    config = config or TrainConfig()
    direct = _attach(model, allocation, split)
    direct_miss = evaluate(direct, split.test, "quantized")
    if retrain and epochs > 0:
        res = retrain_quantized(model, RetrainPlan(dict(allocation.weights),
                                                   dict(allocation.signals),
                                                   epochs, config), split)
        qmodel, miss = res.model, res.test_miss
    else:
        qmodel, miss = direct, direct_miss
    packed = modelstore.memory_footprint(qmodel, "packed")
    alloc = BitAllocation(dict(allocation.weights), dict(allocation.signals), miss, packed)
    report = QuantizationReport(
        alloc, evaluate(model, split.test, "float"), direct_miss, miss, packed,
        modelstore.memory_footprint(qmodel, "float32"), modelstore.header_bytes(qmodel),
        modelstore.multiplication_count(qmodel, frame_rate), qmodel)
    return report


@dataclass
class EscalationResult:
    allocation: BitAllocation
    trace: list
    reached: bool
    model: object = None

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "kind", "group", "bits", "rank_miss", "miss", "allocation"])
            for row in self.trace:
                w.writerow([row["step"], row["kind"], row["group"], row["bits"],
                            f"{row['rank_miss']:.2f}", f"{row['miss']:.2f}", row["allocation"]])


def escalate_bits(model, allocation, split, target_miss, max_bits=4, config=None,
                  epochs=SENSITIVITY_EPOCHS):
    """Greedy bit escalation until the test miss rate reaches ``target_miss``.

    Each round ranks every group below ``max_bits`` by the direct-quantization
    miss rate (validation split) after a one-bit increment, takes the best,
    and re-evaluates the new allocation with retraining (``epochs > 0``).
    """
    config = config or TrainConfig()
    rank_on = split.valid or split.test

    def score(alloc):
        return full_quantization(model, alloc, split, config, epochs, retrain=epochs > 0)

    current = BitAllocation(dict(allocation.weights), dict(allocation.signals))
    rep = score(current)
    trace = []
    step = 0
    while rep.miss > target_miss:
        cands = [k for k in current.keys() if current.get(k) < max_bits]
        if not cands:
            break
        ranked = []
        for key in cands:
            trial = current.bumped(key)
            ranked.append((evaluate(_attach(model, trial, split), rank_on, "quantized"), key))
        rank_miss, key = min(ranked, key=lambda t: t[0])
        current = current.bumped(key)
        rep = score(current)
        step += 1
        trace.append(dict(step=step, kind=key[0], group=key[1], bits=current.get(key),
                          rank_miss=rank_miss, miss=rep.miss,
                          allocation=format_allocation(current)))
        log.info("escalated %s %s -> %d bits: miss %.2f", key[0], key[1],
                 current.get(key), rep.miss)
    current.miss, current.packed_bytes = rep.miss, rep.packed_bytes
    return EscalationResult(current, trace, rep.miss <= target_miss, rep.model)
