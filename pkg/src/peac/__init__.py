"""Grid-matched student-teacher pretraining with patch order, restoration and consistency losses."""

__version__ = "0.1.0"
