import sys

from profile_forge.cli import main

sys.exit(main())
