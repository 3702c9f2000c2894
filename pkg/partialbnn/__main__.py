"""Run the partial-bnn command line."""

import sys

from .cli import main

sys.exit(main())
