"""MAM-FSD lab modules."""
