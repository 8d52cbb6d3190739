"""maggait: waist-to-foot magnetic 6DoF tracking, synthetic gait data,
preprocessing, and activity classification."""

__version__ = "0.1.0"
