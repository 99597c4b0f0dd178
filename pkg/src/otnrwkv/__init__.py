"""RGB-Event pedestrian attribute recognition with Vision-RWKV encoders and OTN fusion."""

__version__ = "0.1.0"
