import sys

from ebflow.cli import main

sys.exit(main())
