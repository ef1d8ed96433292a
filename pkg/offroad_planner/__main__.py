from offroad_planner.cli import main

main()
