from __future__ import annotations

from instance_rsr.cli import main

if __name__ == "__main__":
    main()
