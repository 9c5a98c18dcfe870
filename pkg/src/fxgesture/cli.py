"""Command-line entry point: ``fxgesture <command> [options]``.

Options may also come from a flat ``key = value`` file given with
``--config``; command-line flags win over the file, the file over defaults.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import gesturedata, modelstore, netcore, sensitivity, trainer

log = logging.getLogger("fxgesture")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = dict(
    preset="smartwatch-lstm-128",
    data=None,
    synthetic=False,
    seed=0,
    out="out",
    model=None,
    mode=None,
    bits="2",
    group=None,
    alloc="all=2",
    escalate=False,
    target_miss=None,
    max_bits=4,
    epochs=None,
    retrain_epochs=sensitivity.SENSITIVITY_EPOCHS,
    no_retrain=False,
    per_class=40,
    noise=0.05,
    ratios=None,
    gestures=",".join(gesturedata.DEFAULT_ACCEL_GESTURES),
    frame_rate=None,
    cache_bytes=128 * 1024,
    initial_lr=1e-5,
    final_lr=None,
    patience=5,
    batch_size=8,
    bptt_steps=64,
    optimizer="adadelta",
)

BOOL_KEYS = {"synthetic", "escalate", "no_retrain"}
INT_KEYS = {"seed", "max_bits", "epochs", "retrain_epochs", "per_class",
            "cache_bytes", "batch_size", "bptt_steps"}
FLOAT_KEYS = {"target_miss", "noise", "frame_rate", "initial_lr", "final_lr", "patience"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def read_config_file(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(key, val)
    return out


def _coerce(key, val):
    if key in BOOL_KEYS:
        low = str(val).lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise UsageError(f"{key}: expected a boolean, got {val!r}")
        return low in ("1", "true", "yes")
    if key in INT_KEYS:
        return int(val)
    if key in FLOAT_KEYS:
        return float(val)
    return val


def resolve(args):
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None and not (key in BOOL_KEYS and val is False):
            cfg[key] = val
    return cfg


def write_run_manifest(cfg, out, command):
    path = Path(out) / f"{command}_manifest.txt"
    with open(path, "w") as fh:
        fh.write(f"command = {command}\n")
        for k in sorted(cfg):
            fh.write(f"{k} = {cfg[k]}\n")


def _is_image(graph):
    return len(graph.input_shape) == 3


def load_split(cfg, graph):
    """Dataset for ``graph`` from ``--data`` or the synthetic generator."""
    image = _is_image(graph)
    if cfg["ratios"]:
        ratios = tuple(float(r) for r in str(cfg["ratios"]).split(","))
    else:
        ratios = (0.6, 0.2, 0.2) if image else (0.5, 0.2, 0.3)
    if cfg["data"]:
        with warnings.catch_warnings():
            warnings.simplefilter("error", gesturedata.EmptyDatasetWarning)
            try:
                if image:
                    samples = gesturedata.load_image_dataset(cfg["data"], graph.input_shape[1:])
                else:
                    gest = [g.strip() for g in str(cfg["gestures"]).split(",")]
                    samples = gesturedata.load_accel_dataset(cfg["data"], gest)
            except gesturedata.EmptyDatasetWarning as e:
                raise gesturedata.DataError(str(e)) from None
        name = str(cfg["data"])
    elif cfg["synthetic"]:
        if image:
            samples = gesturedata.synth_video(per_class=cfg["per_class"],
                                              size=graph.input_shape[1],
                                              noise=cfg["noise"], seed=cfg["seed"])
        else:
            samples = gesturedata.synth_accel(graph.output_classes, cfg["per_class"],
                                              noise=cfg["noise"], seed=cfg["seed"])
        name = f"synthetic(seed={cfg['seed']},per_class={cfg['per_class']},noise={cfg['noise']})"
    else:
        raise UsageError("give --data PATH or --synthetic")
    try:
        split = gesturedata.stratified_split(samples, ratios, cfg["seed"])
    except ValueError as e:
        raise gesturedata.DataError(str(e)) from None
    split.name = name
    return split, samples


def train_config(cfg, graph, epochs=None):
    final = cfg["final_lr"]
    if final is None:
        final = 1e-8 if _is_image(graph) else 1e-7
    return trainer.TrainConfig(
        initial_lr=cfg["initial_lr"], final_lr=final, optimizer=cfg["optimizer"],
        max_epochs=epochs if epochs is not None else (
            cfg["epochs"] if cfg["epochs"] is not None else 100),
        patience=cfg["patience"], seed=cfg["seed"], batch_size=cfg["batch_size"],
        bptt_steps=cfg["bptt_steps"])


def _load_model(cfg):
    if not cfg["model"]:
        raise UsageError("this command needs --model")
    try:
        return modelstore.read_model(cfg["model"])
    except FileNotFoundError:
        raise gesturedata.DataError(f"model file {cfg['model']} not found") from None


def _outdir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands

def cmd_train(cfg):
    graph = netcore.preset(cfg["preset"])
    split, samples = load_split(cfg, graph)
    out = _outdir(cfg)
    model = netcore.MasterModel.initialize(graph, cfg["seed"])
    res = trainer.train_float(model, split, train_config(cfg, graph))
    modelstore.write_model(res.model, out / "model_float.fxrn")
    trainer.write_curve(res.curve, out / "curve.csv")
    gesturedata.write_manifest(samples, out / "dataset_manifest.csv")
    write_run_manifest(cfg, out, "train")
    miss = trainer.evaluate(res.model, split.test) if split.test else float("nan")
    print(f"best epoch {res.best_epoch}, valid miss {res.best_valid_miss:.2f}%, "
          f"test miss {miss:.2f}%")
    return EXIT_OK


def _parse_group(text, graph):
    prefix, _, name = text.partition(":")
    if prefix not in ("w", "s") or not name:
        raise UsageError("--group must look like w:<group> or s:<group>")
    kind = sensitivity.WEIGHT if prefix == "w" else sensitivity.SIGNAL
    known = graph.weight_groups() if prefix == "w" else graph.signal_groups()
    if name not in known:
        raise UsageError(f"unknown {kind} group {name!r}")
    return kind, name


def cmd_sensitivity(cfg):
    model = _load_model(cfg)
    split, _ = load_split(cfg, model.graph)
    out = _outdir(cfg)
    bits_list = [int(b) for b in str(cfg["bits"]).split(",")]
    tc = train_config(cfg, model.graph)
    retrain = not cfg["no_retrain"]
    epochs = cfg["retrain_epochs"]
    if cfg["group"]:
        kind, name = _parse_group(cfg["group"], model.graph)
        report = sensitivity.SensitivityReport(
            trainer.evaluate(model, split.test), seed=cfg["seed"], dataset_id=split.name)
        for bits in bits_list:
            d = sensitivity.direct_sensitivity(model, name, bits, split, kind)
            r = sensitivity.retrain_sensitivity(model, name, bits, split, tc, kind, epochs) \
                if retrain else None
            report.rows.append(sensitivity.SensitivityRow(name, kind, bits, d, r))
    else:
        report = sensitivity.sensitivity_table(model, split, bits_list, tc, retrain, epochs,
                                               dataset_id=split.name)
    report.to_csv(out / "sensitivity.csv")
    text = report.as_text()
    (out / "sensitivity.txt").write_text(text + "\n")
    write_run_manifest(cfg, out, "sensitivity")
    print(text)
    return EXIT_OK


def _allocation(cfg, graph):
    try:
        alloc = sensitivity.parse_allocation(cfg["alloc"], graph)
    except (KeyError, ValueError) as e:
        raise UsageError(f"--alloc: {e}") from None
    missing = alloc.missing(graph)
    if missing:
        raise UsageError(f"allocation does not cover groups: {', '.join(missing)}")
    return alloc


def _frame_rate(cfg, graph):
    if cfg["frame_rate"] is not None:
        return cfg["frame_rate"]
    return 30.0 if _is_image(graph) else 10.0


def cmd_quantize(cfg):
    if cfg["escalate"] and cfg["target_miss"] is None:
        raise UsageError("--escalate needs --target-miss")
    model = _load_model(cfg)
    alloc = _allocation(cfg, model.graph)
    split, _ = load_split(cfg, model.graph)
    out = _outdir(cfg)
    tc = train_config(cfg, model.graph)
    epochs = 0 if cfg["no_retrain"] else cfg["retrain_epochs"]
    rate = _frame_rate(cfg, model.graph)
    if cfg["escalate"]:
        esc = sensitivity.escalate_bits(model, alloc, split, cfg["target_miss"],
                                        cfg["max_bits"], tc, epochs)
        esc.write_trace(out / "alloc_trace.csv")
        alloc = esc.allocation
        if not esc.reached:
            print(f"target miss {cfg['target_miss']}% not reached within "
                  f"{cfg['max_bits']} bits; keeping best allocation")
    rep = sensitivity.full_quantization(model, alloc, split, tc, epochs,
                                        retrain=epochs > 0, frame_rate=rate)
    modelstore.write_model(rep.model, out / "model_packed.fxrn", packed=True)
    rep.cost.to_csv(out / "cost.csv")
    (out / "cost.txt").write_text(rep.cost.as_text() + "\n")
    summary = rep.summary()
    (out / "summary.txt").write_text(summary + "\n")
    write_run_manifest(cfg, out, "quantize")
    print(summary)
    return EXIT_OK


def cmd_eval(cfg):
    model = _load_model(cfg)
    split, _ = load_split(cfg, model.graph)
    if not split.test:
        raise gesturedata.DataError("test split is empty")
    mode = cfg["mode"] or ("quantized" if model.weight_specs or model.signal_specs
                           else "float")
    if mode not in ("float", "quantized"):
        raise UsageError("--mode must be float or quantized")
    miss = trainer.evaluate(model, split.test, mode)
    out = _outdir(cfg)
    write_run_manifest(cfg, out, "eval")
    print(f"{miss:.6f}")
    return EXIT_OK


def cmd_pack(cfg):
    """Direct (no retraining) quantization of a float model into a packed file."""
    model = _load_model(cfg)
    alloc = sensitivity.parse_allocation(cfg["alloc"], model.graph)
    missing = [g for g in model.graph.weight_groups() if g not in alloc.weights]
    if missing:
        raise UsageError(f"allocation does not cover weight groups: {', '.join(missing)}")
    samples = []
    if alloc.signals:
        split, _ = load_split(cfg, model.graph)
        samples = split.train
    out = _outdir(cfg)
    q = trainer.attach_specs(model, alloc.weights, alloc.signals, samples, cfg["seed"])
    n = modelstore.write_model(q, out / "model_packed.fxrn", packed=True)
    write_run_manifest(cfg, out, "pack")
    payload = modelstore.memory_footprint(q, "packed")
    print(f"wrote {n} bytes ({payload} B weights, {n - payload} B header)")
    return EXIT_OK


def cmd_report(cfg):
    if cfg["model"]:
        model = _load_model(cfg)
        graph = model.graph
        bits = None if set(model.weight_specs) >= set(graph.weight_groups()) else \
            _allocation(cfg, graph).weights
        target = model
    else:
        graph = netcore.preset(cfg["preset"])
        bits = _allocation(cfg, graph).weights
        target = graph
    rep = modelstore.multiplication_count(target, _frame_rate(cfg, graph), bits)
    out = _outdir(cfg)
    rep.to_csv(out / "cost.csv")
    verdict = modelstore.cache_fit(rep, cfg["cache_bytes"])
    text = rep.as_text() + f"\nfits in {cfg['cache_bytes']:,} B cache: {'yes' if verdict else 'no'}"
    (out / "cost.txt").write_text(text + "\n")
    write_run_manifest(cfg, out, "report")
    print(text)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sensitivity": cmd_sensitivity,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "pack": cmd_pack,
    "report": cmd_report,
}


def build_parser():
    p = _Parser(prog="fxgesture", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file")
        s.add_argument("--preset", choices=sorted(netcore.PRESETS))
        s.add_argument("--data", help="dataset root directory")
        s.add_argument("--synthetic", action="store_true", default=None,
                       help="use the seeded synthetic generator")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--model", help="input .fxrn model")
        s.add_argument("--mode", choices=("float", "quantized"))
        s.add_argument("--bits", help="comma-separated bit widths")
        s.add_argument("--group", help="w:<group> or s:<group>")
        s.add_argument("--alloc", help='e.g. "all=2,s:L1=4"')
        s.add_argument("--escalate", action="store_true", default=None)
        s.add_argument("--target-miss", dest="target_miss", type=float)
        s.add_argument("--max-bits", dest="max_bits", type=int)
        s.add_argument("--epochs", type=int, help="max training epochs")
        s.add_argument("--retrain-epochs", dest="retrain_epochs", type=int)
        s.add_argument("--no-retrain", dest="no_retrain", action="store_true", default=None)
        s.add_argument("--per-class", dest="per_class", type=int)
        s.add_argument("--noise", type=float)
        s.add_argument("--ratios", help="train,valid,test fractions")
        s.add_argument("--gestures", help="comma-separated accelerometer gesture ids")
        s.add_argument("--frame-rate", dest="frame_rate", type=float)
        s.add_argument("--cache-bytes", dest="cache_bytes", type=int)
        s.add_argument("--initial-lr", dest="initial_lr", type=float)
        s.add_argument("--final-lr", dest="final_lr", type=float)
        s.add_argument("--patience", type=float)
        s.add_argument("--batch-size", dest="batch_size", type=int)
        s.add_argument("--bptt-steps", dest="bptt_steps", type=int)
        s.add_argument("--optimizer", choices=("adadelta", "nesterov"))
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"fxgesture {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (gesturedata.DataError, modelstore.ModelFormatError, OSError) as e:
        print(f"fxgesture {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, ValueError, FloatingPointError, ArithmeticError) as e:
        print(f"fxgesture {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
