# Models package for multi-task face analysis system
