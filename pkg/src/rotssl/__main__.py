import sys

from rotssl.cli import main

sys.exit(main())
