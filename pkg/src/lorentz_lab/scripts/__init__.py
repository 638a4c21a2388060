"""CLI entry point wrappers for lorentz-lab scripts."""

from lorentz_lab.scripts.lorentz_lab_cli import main as lab_main

__all__ = ["lab_main"]
