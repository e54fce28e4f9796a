import sys

from actiongrad.cli import main

sys.exit(main())
