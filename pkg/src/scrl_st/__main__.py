"""Main entry point for ``python -m scrl_st``."""

from .cli import main

if __name__ == "__main__":
    main()
