import sys

from curbzones.cli import main

sys.exit(main())
