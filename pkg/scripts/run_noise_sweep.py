#!/usr/bin/env python3
"""Full noise sweep over the default grid plus the aggregated report.

One sweep trains 12 models (6 grid points x {text-only, supervised});
expect roughly half an hour on a 2-core CPU.
"""

import sys

from noisecap.cli import main

OUT = "runs/sweep"

if __name__ == "__main__":
    seed = sys.argv[1] if len(sys.argv) > 1 else "0"
    rc = main(["sweep", "--out", OUT, "--seed", seed])
    if rc == 0:
        rc = main(["report", OUT])
    sys.exit(rc)
