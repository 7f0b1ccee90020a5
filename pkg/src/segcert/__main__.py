import sys

from segcert.cli import main

sys.exit(main())
