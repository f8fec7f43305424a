"""Chord under churn: a discrete-event simulator, fluid-model predictions, and the bridge between them."""
