import sys

from ttcompute.cli.module import main

sys.exit(main())
