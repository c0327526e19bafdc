#!/usr/bin/env python3
"""Quickstart: generate data, estimate the noise scale, train, evaluate.

Writes everything under runs/quickstart. Takes a few minutes on CPU.
"""

import sys

from noisecap.cli import main

OUT = "runs/quickstart"
COMMON = ["--out", OUT, "--seed", "0"]

if __name__ == "__main__":
    for cmd in (["gen-data", "--force"], ["estimate-eps"], ["train"], ["eval"]):
        rc = main(cmd + COMMON)
        if rc != 0:
            sys.exit(rc)
