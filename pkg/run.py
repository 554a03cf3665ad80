#!/usr/bin/env python3
"""
命令行启动脚本
"""

import sys
from pathlib import Path

# 添加当前目录到Python路径
sys.path.insert(0, str(Path(__file__).resolve().parent))

from landmark_cli import main

if __name__ == '__main__':
    sys.exit(main())
