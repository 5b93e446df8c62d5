import sys

from drselect.processing.cli import main

sys.exit(main())
