"""Key setup, aggregation rounds and user addition, as sans-IO nodes plus runners."""
