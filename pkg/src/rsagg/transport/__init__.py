"""Envelope framing, relayed secure channel, simulator and TCP driver."""
