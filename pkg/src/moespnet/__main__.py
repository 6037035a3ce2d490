from moespnet.cli import main
import sys

sys.exit(main())
