"""Knowledge-infomax recommender: hyperplane preference connections over KG representations."""

__version__ = "0.1.0"
