from metamorph import cli

cli.main()
