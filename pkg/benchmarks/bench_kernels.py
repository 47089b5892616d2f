"""Compare the compiled row kernels with the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Reports the median time per
call for batch-sized and dataset-sized inputs, then one training epoch under
each backend (each in its own interpreter, since the backend is chosen at
import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tolerant_kd import _kernels_py

try:
    from tolerant_kd import _kernels
except ImportError:
    _kernels = None

EPOCH_SNIPPET = """
import time, warnings
warnings.simplefilter("ignore")
from tolerant_kd import BACKEND
from tolerant_kd.data import SynthSpec, generate
from tolerant_kd.generations import ProcessConfig, fit
from tolerant_kd.model import SgdConfig, init_params
tr, te = generate(SynthSpec())
cfg = ProcessConfig(u=0.6, sgd=SgdConfig(base_lr=0.05, epochs=1, lr_milestones=()))
p = init_params(cfg.model_spec(tr.dim, tr.num_classes, 0))
loss = cfg.patriarch_loss()
t = time.perf_counter()
fit(p, tr, te, lambda z, y, i: loss(z, y), cfg.sgd)
print(BACKEND, time.perf_counter() - t)
"""


def median_time(fn, repeat):
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def kernel_cases(rows, classes, rng):
    z = rng.normal(size=(rows, classes)) * 3
    lp = _kernels_py.log_softmax_rows(z)
    p = np.exp(lp)
    g = rng.normal(size=(rows, classes))
    return {
        "log_softmax_rows": lambda m: m.log_softmax_rows(z),
        "log_softmax_backward_rows": lambda m: m.log_softmax_backward_rows(g, lp),
        "rank_rows(k=5)": lambda m: m.rank_rows(p, 5),
        "negentropy_rows": lambda m: m.negentropy_rows(p),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--no-epoch", action="store_true", help="skip the end-to-end epoch timing")
    args = ap.parse_args(argv)
    if _kernels is None:
        sys.exit("compiled extension not built; run `pip install --no-build-isolation -e .` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'shape':>12}{'cython us':>12}{'numpy us':>12}{'speedup':>9}")
    for rows in (128, 10000):
        for name, call in kernel_cases(rows, 100, rng).items():
            tc = median_time(lambda: call(_kernels), args.repeat)
            tp = median_time(lambda: call(_kernels_py), args.repeat)
            print(f"{name:<28}{f'{rows}x100':>12}{tc * 1e6:>12.1f}{tp * 1e6:>12.1f}{tp / tc:>9.2f}")
    if not args.no_epoch:
        print("\none TSD training epoch, default data and model, batch 128")
        for flag in ("0", "1"):
            env = dict(os.environ, TOLERANT_KD_PURE_PYTHON=flag)
            out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
            backend, seconds = out.stdout.split()
            print(f"  {backend:<8}{float(seconds):.3f} s")


if __name__ == "__main__":
    main()
