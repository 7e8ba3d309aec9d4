import sys

from listlearn.cli import main

sys.exit(main())
