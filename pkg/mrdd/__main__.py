import sys

from mrdd.cli import main

sys.exit(main())
