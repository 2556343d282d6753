from sknet.cli import main

main()
