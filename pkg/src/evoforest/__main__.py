import sys

from evoforest.cli import main

sys.exit(main())
