import sys

from tsb_monitor.main import main

sys.exit(main())
