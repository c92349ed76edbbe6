import sys

from kgdiv.cli import main

sys.exit(main())
