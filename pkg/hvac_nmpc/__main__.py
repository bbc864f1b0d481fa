from hvac_nmpc.cli import main

raise SystemExit(main())
