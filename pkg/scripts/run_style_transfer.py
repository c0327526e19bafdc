#!/usr/bin/env python3
"""Style adaptation: train on a styled text corpus, then caption images.

Generates a romantic-flavored corpus, trains text-only at the estimated
noise scale, and evaluates style marker rate plus attribute accuracy on
image embeddings.
"""

import sys

from noisecap.cli import main

OUT = "runs/style"
STYLE = ["--set", "world.style=romantic_like"]

if __name__ == "__main__":
    for cmd in (["gen-data", "--force"], ["estimate-eps"], ["train"], ["eval"]):
        rc = main(cmd + ["--out", OUT, "--seed", "0"] + STYLE)
        if rc != 0:
            sys.exit(rc)
