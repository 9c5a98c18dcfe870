"""Memory and multiplication budgets for every preset at 2-4 bits."""

import argparse

from fxgesture import modelstore, netcore


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache-bytes", type=int, default=128 * 1024)
    args = ap.parse_args()
    print(f"{'preset':<22}{'weights':>9}{'float32 B':>12}{'2b B':>9}{'3b B':>9}{'4b B':>9}"
          f"{'mult/s':>14}  fits@2b")
    for name in sorted(netcore.PRESETS):
        g = netcore.preset(name)
        rate = 30.0 if len(g.input_shape) == 3 else 10.0
        rep = modelstore.multiplication_count(g, rate, bits=2)
        sizes = [modelstore.memory_footprint(g, "packed", bits=b) for b in (2, 3, 4)]
        print(f"{name:<22}{g.param_count():>9,}{modelstore.memory_footprint(g):>12,}"
              + "".join(f"{s:>9,}" for s in sizes)
              + f"{rep.total_per_second:>14,.0f}  {modelstore.cache_fit(rep, args.cache_bytes)}")
    print()
    for name in ("cambridge-cnn-lstm", "smartwatch-lstm-128"):
        g = netcore.preset(name)
        rate = 30.0 if len(g.input_shape) == 3 else 10.0
        print(modelstore.multiplication_count(g, rate, bits=2).as_text())
        print()


if __name__ == "__main__":
    main()
