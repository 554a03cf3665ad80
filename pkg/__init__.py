"""
人脸关键点定位工具包
"""

__version__ = "1.1.0"
__author__ = "Face Landmark Toolkit Team"
__description__ = "人脸关键点定位工具：五点对齐、热图编解码、上采样头规划与评估"
