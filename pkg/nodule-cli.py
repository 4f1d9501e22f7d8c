#!/usr/bin/env python3
"""
Command-line entry point for the nodule synthesis pipeline.

Usage:
    python nodule-cli.py synth-data --n 64 --seed 1 --out runs/data
    python nodule-cli.py gradcheck --out runs/gradcheck
"""
import sys
from pathlib import Path

# Add parent directory to path for local import
sys.path.insert(0, str(Path(__file__).parent))

try:
    from nodulegen.cli import main
except ImportError as e:
    print("Error: nodulegen package not found.")
    print("Make sure you're running this script from the repository root directory.")
    print("\nOption 1: Run from repository root (no installation needed)")
    print("  python nodule-cli.py ...")
    print("\nOption 2: Install the package")
    print("  pip install -e .")
    print(f"\nImport error details: {e}")
    sys.exit(1)


if __name__ == '__main__':
    main()
