"""Print VFL uplink volume against centralised upload volume for a finished run directory."""

import sys

from vflprecode.experiment import accounting_report
from vflprecode.vfl import bytes_to_mb, comm_volume

if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: accounting.py RUN_DIR")
    print(f"reference point: 800 epochs, 7 vehicles -> {bytes_to_mb(comm_volume(800, 7))} MB")
    for a in accounting_report(sys.argv[1]):
        ratio = a.cl_bytes / a.vfl_bytes if a.vfl_bytes else float("inf")
        print(f"{a.scheme:10s} K={a.K} seed={a.seed} epochs={a.epochs:4d} VFL {a.vfl_mb:8.4f} MB  "
              f"CL {a.cl_mb:8.4f} MB  ratio {ratio:.1f}")
