from .validation import check_attention, check_images, check_labels
