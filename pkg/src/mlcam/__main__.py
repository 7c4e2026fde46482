import sys

from mlcam.cli import main

sys.exit(main())
