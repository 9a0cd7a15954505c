from ictseg.cli import main

raise SystemExit(main())
