from __future__ import annotations

import sys

from jccopf.cli import main

sys.exit(main())
