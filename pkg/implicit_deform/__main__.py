"""Entry point for ``python -m implicit_deform``"""

import sys

from .cli import main

sys.exit(main())
