"""Call-control abstraction layer over SIP and MGCP, with a simulated media
server, a prepaid calling card service and a load/metrology harness."""

__version__ = "0.1.0"
