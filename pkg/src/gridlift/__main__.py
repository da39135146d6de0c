import sys

from gridlift.cli import main

sys.exit(main())
