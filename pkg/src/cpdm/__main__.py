import sys

from cpdm.cli import main

sys.exit(main())
