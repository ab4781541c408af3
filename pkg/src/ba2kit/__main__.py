"""
Entry point for running ba2kit as a module: python -m ba2kit
"""

from .cli import main

if __name__ == "__main__":
    exit(main())
