"""Dysarthria recognition with a hypernetwork-generated classifier head.

Speech clip -> log-Mel (or MFCC) / delta / delta-delta image -> AlexNet
features (768-d) -> linear head whose weights come from a hypernetwork.
"""

__version__ = "0.1.0"
