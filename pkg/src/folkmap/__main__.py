import sys

from folkmap.cli import main

sys.exit(main())
