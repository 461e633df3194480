from omlab.cli import main

main()
