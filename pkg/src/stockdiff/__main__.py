import sys

from stockdiff.cli import main

sys.exit(main())
