"""segprompt: segmentation-aware multimodal report generation at toy scale."""

__version__ = "0.1.0"
