"""Compare the compiled and pure-Python exact search kernels.

    python benchmarks/bench_search.py [--instances 10] [--repeat 3]

Both backends must agree on every result; the script prints the median time
per instance and the speed-up.
"""
import argparse
import statistics
import time

from droneassess import search
from droneassess.instgen import GenSpec, generate_instance

CASES = [
    ("6 nodes / 7 links, K=2", GenSpec(n_nodes=6, n_links=7), 2, 1.8),
    ("7 nodes / 8 links, K=2", GenSpec(n_nodes=7, n_links=8), 2, 2.0),
    ("8 nodes / 10 links, K=2", GenSpec(n_nodes=8, n_links=10), 2, 2.0),
    ("9 nodes / 11 links, K=3", GenSpec(n_nodes=9, n_links=11), 3, 2.2),
]


def time_backend(instances, backend, revisit, repeat):
    per_run = []
    results = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        results = [search.search(i.network, i.K, i.budget, revisit, backend=backend) for i in instances]
        per_run.append((time.perf_counter() - t0) / len(instances))
    return statistics.median(per_run), results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if "compiled" not in search.BACKENDS:
        raise SystemExit("compiled kernel is not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'case':<26}{'revisit':>8}{'python [ms]':>14}{'compiled [ms]':>16}{'speed-up':>10}")
    for label, spec, K, p_max in CASES:
        instances = [generate_instance(spec, K, p_max, 10.0, seed) for seed in range(args.instances)]
        for revisit in (True, False):
            t_py, r_py = time_backend(instances, "python", revisit, args.repeat)
            t_c, r_c = time_backend(instances, "compiled", revisit, args.repeat)
            if r_py != r_c:
                raise SystemExit(f"backends disagree on {label} (revisit={revisit})")
            print(f"{label:<26}{str(revisit):>8}{1e3 * t_py:>14.2f}{1e3 * t_c:>16.2f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
