import sys

from nbf.cli import main

sys.exit(main())
