import sys

from pyspil.cli import main

sys.exit(main())
