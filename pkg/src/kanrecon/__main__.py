import sys

from kanrecon.cli import main

sys.exit(main())
