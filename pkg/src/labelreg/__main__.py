import sys

from labelreg.cli import main

sys.exit(main())
