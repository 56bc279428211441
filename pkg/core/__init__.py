# Core package for multi-task face analysis system
