import sys

from wavemo.cli import main

sys.exit(main())
