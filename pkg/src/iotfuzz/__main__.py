import sys

from iotfuzz.cli import main

sys.exit(main())
