import sys

from allconv_emg.cli import main

sys.exit(main())
