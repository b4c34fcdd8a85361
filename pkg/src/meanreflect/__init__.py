"""Mean-reflected McKean-Vlasov SDEs with jumps."""

__version__ = "0.1.0"
