"""Next-activity and next-timestamp prediction for running process cases.

Vanilla LSTM and time-aware LSTM (T-LSTM) multitask models with
hand-written backpropagation, cost-sensitive loss weighting and the
usual event-log preprocessing pipeline.
"""

__version__ = "0.1.0"
