import sys

from pavecrack.cli import main

sys.exit(main())
