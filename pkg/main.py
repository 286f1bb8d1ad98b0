#!/usr/bin/env python3
"""Entry point for the psigan command line."""

from psigan.cli import main

if __name__ == "__main__":
    main()
