#!/usr/bin/env python3
"""
homopursuit - CLI Entry Point
Simulate, fit, select ranks and evaluate from the command line
"""
import sys

from homopursuit.cli import main

if __name__ == "__main__":
    sys.exit(main())
