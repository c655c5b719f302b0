from psn.commands import bench, evaluate, memory, runs, train, verify

COMMANDS = (bench, train, evaluate, verify, memory, runs)
