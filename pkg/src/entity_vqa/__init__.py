"""Entity VQA - retrieval-augmented entity-centric visual question answering toolkit."""

__version__ = "0.1.0"
