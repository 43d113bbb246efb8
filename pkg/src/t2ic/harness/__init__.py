"""Training, evaluation, ablation and grid rendering."""
