import sys

from patchcraft_denoise.cli import main


if __name__ == "__main__":
    sys.exit(main())
