"""CNN-LSTM image-sequence experiment on synthetic glyph clips (or a
``root/<class>/<sequence>/<frame>.png`` dataset).

The full-size preset is slow in numpy; ``--small`` swaps in a reduced
network with the same group layout for quick runs.
"""

import argparse
import logging
from pathlib import Path

from fxgesture import gesturedata, modelstore, netcore, sensitivity, trainer
from fxgesture.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data")
    ap.add_argument("--per-class", type=int, default=6)
    ap.add_argument("--frames", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--patience", type=int, default=20,
                    help="AdaDelta sits on a plateau for ~25 epochs before the CNN picks up")
    ap.add_argument("--retrain-epochs", type=int, default=3)
    ap.add_argument("--small", action="store_true")
    ap.add_argument("--out", default="runs/image")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    if args.small:
        graph = netcore.cnn_lstm_graph(name="cnn-lstm-small", maps=(8, 8, 16), units=32)
    else:
        graph = netcore.preset("cambridge-cnn-lstm")
    if args.data:
        samples = gesturedata.load_image_dataset(args.data, graph.input_shape[1:])
    else:
        samples = gesturedata.synth_video(per_class=args.per_class, frames=args.frames,
                                          seed=args.seed)
    split = gesturedata.stratified_split(samples, (0.5, 0.25, 0.25), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = TrainConfig(max_epochs=args.epochs, patience=args.patience, seed=args.seed)
    res = trainer.train_float(netcore.MasterModel.initialize(graph, args.seed), split, cfg)
    model = res.model
    trainer.write_curve(res.curve, out / "curve.csv")
    print(f"float test miss {trainer.evaluate(model, split.test):.2f}%")

    table = sensitivity.sensitivity_table(model, split, (2,), cfg, retrain=args.retrain_epochs > 0,
                                          epochs=args.retrain_epochs,
                                          dataset_id=args.data or "synthetic")
    table.to_csv(out / "sensitivity.csv")
    print(table.as_text())

    rep = sensitivity.full_quantization(model, sensitivity.BitAllocation.uniform(graph, 2),
                                        split, cfg, args.retrain_epochs)
    modelstore.write_model(rep.model, out / "model_packed.fxrn", packed=True)
    (out / "summary.txt").write_text(rep.summary() + "\n")
    print(rep.summary())
    print(rep.cost.as_text())


if __name__ == "__main__":
    main()
