from mediaengine.cli import main

raise SystemExit(main())
