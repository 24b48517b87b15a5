"""
Active Object Recognition CLI

Entry point for the gen-data, train, eval and export-policy commands.

Usage:
    python scripts/aor.py gen-data --out runs/data
    python scripts/aor.py train --out runs/dn --train.mask_repeats true
    python scripts/aor.py eval --out runs/dn --threads 4
"""

import os
import sys

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
