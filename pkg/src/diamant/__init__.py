"""DIAMANT: dual image / attention-map encoders for segmentation."""
