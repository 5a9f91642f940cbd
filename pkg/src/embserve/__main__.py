import sys

from embserve.cli import main

sys.exit(main())
