import sys

from revkd.cli import main

sys.exit(main())
