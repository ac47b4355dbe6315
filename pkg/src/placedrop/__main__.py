import sys

from placedrop.cli import main


sys.exit(main())
