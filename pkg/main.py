#!/usr/bin/env python3
"""
Aegis - self-healing orchestration runtime for LLM agents
Entry point for the experiment CLI.
"""
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.cli import cli_run


def main():
    """Main entry point."""
    sys.exit(cli_run(sys.argv[1:]))


if __name__ == "__main__":
    main()
