from snislm.cli import main

main()
