# Puts the top-level modules on sys.path when pytest runs from a checkout
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
