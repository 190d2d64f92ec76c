"""Asset files, frame sequences, landmark smoothing and synthetic scenes."""
