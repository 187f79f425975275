"""Speech-only detection of when a listener should respond with emotional
validation: a two-branch (paralinguistic + emotion) encoder model, its
pretraining stages, a synthetic corpus, and the evaluation harness."""

__version__ = "0.1.0"
