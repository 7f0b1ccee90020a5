"""Certification time over image sizes, metrics and thread counts.

    python scripts/bench_grid.py --sizes 256x256,512x512,1024x1024 --repeat 5
"""
import argparse
import os

from segcert.cli import grid_size, run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="256x256,512x512,1024x1024")
    ap.add_argument("--classes", type=int, default=19)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", default=f"1,{os.cpu_count() or 1}")
    args = ap.parse_args()
    threads = sorted({int(t) for t in args.threads.split(",")})
    print(f"{'size':>10} {'metric':>10} {'threads':>7} {'median ms':>10} {'min ms':>8}")
    for size in args.sizes.split(","):
        for metric in ("pixel-acc", "fnr", "stability", "class-iou"):
            for t in threads:
                r = run_bench(grid_size(size), args.classes, metric, repeat=args.repeat, threads=t)
                print(f"{r['size']:>10} {metric:>10} {t:>7} {r['median_ms']:10.1f} {r['min_ms']:8.1f}")


if __name__ == "__main__":
    main()
