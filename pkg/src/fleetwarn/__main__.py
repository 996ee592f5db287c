import sys

from fleetwarn.cli import main

sys.exit(main())
