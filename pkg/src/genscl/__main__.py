#!/usr/bin/env python3
"""
Main entry point for the genscl package.
Allows running the package with `python -m genscl`.
"""

from .launcher import main

if __name__ == "__main__":
    main()
