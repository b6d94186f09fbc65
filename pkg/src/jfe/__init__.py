"""Joint factor embedding for nuisance-robust speaker verification."""
