"""``python -m dynalab`` runs the experiment CLI."""
import sys

from .expcli import main

sys.exit(main())
