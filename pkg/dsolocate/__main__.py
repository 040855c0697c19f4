import sys

from dsolocate.cli import main

sys.exit(main())
