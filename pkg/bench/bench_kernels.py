"""Compare the numpy and compiled kernel backends.

Times the bag encoder forward/backward and the SGD update inside real
training steps (default model sizes, default synthetic bags), then checks that
both backends produce the same parameters after the same steps.

    python3 bench/bench_kernels.py [--samples 60] [--repeats 3]
"""
import argparse
import time

import numpy as np

from bidistill import kernels
from bidistill.data import SynthConfig, Standardizer, synth_generate
from bidistill.model import BDModel
from bidistill.numcore import RngStream
from bidistill.train import TrainConfig, train_step_multi, train_step_single


def run(backend, samples, cfg, steps):
    kernels.use_backend(backend)
    model = BDModel(cfg.dims(samples[0].bag.shape[1]), RngStream(0, "bench"))
    om, os_ = cfg.sgd(), cfg.sgd()
    t = time.perf_counter()
    for _ in range(steps):
        for s in samples:
            train_step_multi([s], model, cfg, om)
            train_step_single([s], model, cfg, os_)
    return time.perf_counter() - t, model.params.snapshot()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=60)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--steps", type=int, default=1, help="passes over the samples per timing")
    args = ap.parse_args()

    samples = synth_generate(SynthConfig(n=args.samples, seed=0))
    samples = Standardizer.fit(samples).apply(samples)
    cfg = TrainConfig(lr=1e-2)
    backends = kernels.available()
    print(f"{len(samples)} samples, default sizes, backends: {', '.join(backends)}")
    best, params = {}, {}
    for b in backends:
        times = []
        for _ in range(args.repeats):
            dt, params[b] = run(b, samples, cfg, args.steps)
            times.append(dt)
        best[b] = min(times)
        print(f"{b:>9}: {best[b]:.3f} s per {args.steps} pass(es)  ({1e3 * best[b] / (len(samples) * args.steps):.2f} ms/sample)")
    if "compiled" in best:
        print(f"speedup: {best['python'] / best['compiled']:.2f}x")
        diff = max(float(np.max(np.abs(params["python"][k] - params["compiled"][k]))) for k in params["python"])
        print(f"max parameter difference between backends: {diff:.3e}")


if __name__ == "__main__":
    main()
