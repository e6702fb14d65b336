#!/usr/bin/env python3
"""
Launcher for ``python -m src.main``; forwards every argument to the CLI.
"""

import sys
from typing import List, Optional


def main(args: Optional[List[str]] = None) -> int:
    """Run the voxfuse CLI and return its exit code."""
    from src.cli import VoxFuseCLI

    try:
        return VoxFuseCLI().run(sys.argv[1:] if args is None else args)
    except KeyboardInterrupt:
        print("\nOperation cancelled.", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
