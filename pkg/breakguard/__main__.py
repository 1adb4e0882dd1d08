import sys

from breakguard.cli import main

sys.exit(main())
