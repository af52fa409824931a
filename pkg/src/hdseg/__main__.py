import sys

from hdseg.cli import main

sys.exit(main())
