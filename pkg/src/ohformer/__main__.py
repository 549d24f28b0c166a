import sys

from ohformer.cli import main

sys.exit(main())
