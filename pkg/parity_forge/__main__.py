import sys

from parity_forge.cli import main

sys.exit(main())
