"""Module entry point so ``python -m graphtpp`` mirrors the console script."""

from .cli import main

if __name__ == "__main__":
    main()
