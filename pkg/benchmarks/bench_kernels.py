"""Time the sampler and prediction kernels under numba and under the interpreted fallback.

Each backend runs in its own interpreter because the choice is fixed at
import time by EBCOBART_DISABLE_JIT.

    python3 benchmarks/bench_kernels.py [--N 60] [--p 10] [--K 10] [--sweeps 60] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from ebcobart import backend
from ebcobart.sampler import ChainConfig, Dataset, run_chains
from ebcobart.trees import Hyperparams

N, p, K, sweeps, repeat = map(int, sys.argv[1:6])
rng = np.random.default_rng(0)
X = rng.uniform(size=(N, p))
y = 10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 5 * X[:, 2] + rng.standard_normal(N)
data = Dataset(X, y)
hyper = Hyperparams.uniform(p, lam=0.05)
cfg = ChainConfig(1, sweeps, sweeps // 4, seed=1)

t0 = time.perf_counter()
draws = run_chains(data, hyper, K, cfg)
first = time.perf_counter() - t0  # includes compilation under numba
fit, pred = [], []
for _ in range(repeat):
    t0 = time.perf_counter()
    draws = run_chains(data, hyper, K, cfg)
    fit.append(time.perf_counter() - t0)
    t0 = time.perf_counter()
    draws.predict_latent(X)
    pred.append(time.perf_counter() - t0)
print(json.dumps({"backend": backend(), "first": first, "fit": min(fit), "predict": min(pred),
                  "digest": draws.digest()}))
"""


def run(disable_jit, args):
    env = dict(os.environ, EBCOBART_DISABLE_JIT="1" if disable_jit else "0", EBCOBART_THREADS="1")
    argv = [str(v) for v in (args.N, args.p, args.K, args.sweeps, args.repeat)]
    out = subprocess.run([sys.executable, "-c", WORKER, *argv], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--N", type=int, default=60)
    parser.add_argument("--p", type=int, default=10)
    parser.add_argument("--K", type=int, default=10)
    parser.add_argument("--sweeps", type=int, default=60)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    jit, py = run(False, args), run(True, args)
    print(f"problem: N={args.N} p={args.p} K={args.K} sweeps={args.sweeps} (1 chain)")
    print(f"{'backend':<8} {'first call s':>13} {'fit s':>10} {'predict s':>10}")
    for r in (jit, py):
        print(f"{r['backend']:<8} {r['first']:>13.3f} {r['fit']:>10.4f} {r['predict']:>10.5f}")
    print(f"speed-up fit {py['fit'] / jit['fit']:.0f}x, predict {py['predict'] / jit['predict']:.0f}x")
    print("draws identical across backends:", jit["digest"] == py["digest"])


if __name__ == "__main__":
    main()
