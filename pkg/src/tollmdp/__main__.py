from tollmdp.cli import main

raise SystemExit(main())
