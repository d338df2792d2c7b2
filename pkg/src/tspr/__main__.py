import sys

from tspr.cli import main

sys.exit(main())
