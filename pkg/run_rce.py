#!/usr/bin/env python3
"""
Rich Character Embedding - Main Runner Script
=============================================

Runs the command line toolkit: tokenization, encoder training, embedding
export, intrinsic metrics, probes and the small language model.

Usage:
    python run_rce.py --help
    python run_rce.py tokenize Liberté
    python run_rce.py --seed 1 --out model.bin train --corpus corpus.txt --steps 2000
"""

import os
import sys

SOURCE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'rich-char-embed')


def main():
    if not os.path.isdir(SOURCE_DIR):
        print(f"[ERROR] Source directory not found: {SOURCE_DIR}", file=sys.stderr)
        return 1
    sys.path.insert(0, SOURCE_DIR)
    from main import main as run
    return run(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
