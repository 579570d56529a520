"""Multi-domain CNN tracking with RoI features read off one shared map per frame."""
