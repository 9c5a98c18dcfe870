"""Accelerometer LSTM experiment: float training, layerwise sensitivity at
2-4 bits, a few whole-model allocations, and greedy escalation.

    python3 scripts/accel_pipeline.py --units 32 --out runs/accel
    python3 scripts/accel_pipeline.py --data /path/to/smartwatch --units 128
"""

import argparse
import logging
from pathlib import Path

from fxgesture import gesturedata, netcore, sensitivity, trainer
from fxgesture.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", help="accelerometer dataset root (synthetic when omitted)")
    ap.add_argument("--units", type=int, default=32)
    ap.add_argument("--per-class", type=int, default=40)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--retrain-epochs", type=int, default=10)
    ap.add_argument("--bits", default="2,3,4")
    ap.add_argument("--out", default="runs/accel")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    if args.data:
        samples = gesturedata.load_accel_dataset(args.data)
    else:
        samples = gesturedata.synth_accel(8, args.per_class, noise=args.noise, seed=args.seed)
    split = gesturedata.stratified_split(samples, (0.5, 0.2, 0.3), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    graph = netcore.accel_lstm_graph(args.units)
    cfg = TrainConfig(final_lr=1e-7, max_epochs=args.epochs, seed=args.seed)
    res = trainer.train_float(netcore.MasterModel.initialize(graph, args.seed), split, cfg)
    trainer.write_curve(res.curve, out / "curve.csv")
    model = res.model
    print(f"float test miss {trainer.evaluate(model, split.test):.2f}%")

    bits = [int(b) for b in args.bits.split(",")]
    table = sensitivity.sensitivity_table(model, split, bits, cfg, epochs=args.retrain_epochs,
                                          dataset_id="synthetic" if not args.data else args.data)
    table.to_csv(out / "sensitivity.csv")
    (out / "sensitivity.txt").write_text(table.as_text() + "\n")
    print(table.as_text())

    for text in ("all=2", "w:*=2,s:In=2,s:L1=4", "all=3"):
        alloc = sensitivity.parse_allocation(text, graph)
        rep = sensitivity.full_quantization(model, alloc, split, cfg, args.retrain_epochs,
                                            frame_rate=10.0)
        print(f"\n{rep.summary()}")

    esc = sensitivity.escalate_bits(model, sensitivity.BitAllocation.uniform(graph, 2), split,
                                    target_miss=trainer.evaluate(model, split.test) + 1.0,
                                    config=cfg, epochs=args.retrain_epochs)
    esc.write_trace(out / "alloc_trace.csv")
    print(f"\nescalation {'reached' if esc.reached else 'did not reach'} target: "
          f"{sensitivity.format_allocation(esc.allocation)} -> {esc.allocation.miss:.2f}%")


if __name__ == "__main__":
    main()
