import sys

from dualcomp.cli import main

sys.exit(main())
