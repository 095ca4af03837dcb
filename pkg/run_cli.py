#!/usr/bin/env python3
"""
Entry point script for the wmunlearn command-line interface.

    python run_cli.py attack --config configs/synth_smoke.yaml
    python run_cli.py theory --sweep 200 --out sweep.csv
"""

import sys
import os

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))

from wmunlearn.cli import main

if __name__ == "__main__":
    sys.exit(main())
