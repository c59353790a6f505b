"""Train the default toy bundle and print the held-out summary (same as ``deskasr train-toy``)."""

import sys

from deskasr.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "toy_model"
    sys.exit(main(["train-toy", "--out", out, *sys.argv[2:]]))
