"""Compare the Cython kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--scale 4000] [--repeat 5]
"""

import argparse

from esa import bench, kernels


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=int, default=4000, help="BA node count of the test graph")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        print("compiled backend unavailable; timing the fallback only")
    print(bench.format_rows(bench.kernel_benchmark(args.scale, args.repeat)), end="")


if __name__ == "__main__":
    main()
