#!/usr/bin/env python3
"""Scenario-by-tolerance sweep of the classifier study; writes CSV artifacts."""

import argparse
import sys
from pathlib import Path

from trustsim.cli import main as cli_main


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(Path(__file__).parent.parent
                                                / "configs" / "classifier.toml"))
    parser.add_argument("--out", default="sweep_results")
    parser.add_argument("--tolerances", help="override the grid, e.g. 0.05,0.2,0.8")
    args = parser.parse_args()
    argv = ["sweep", "--config", args.config, "--out", args.out]
    if args.tolerances:
        argv += ["--tolerances", args.tolerances]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
