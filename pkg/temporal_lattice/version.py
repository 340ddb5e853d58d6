# Updated by bumpver, read by setup.py and the package __init__
VERSION: str = "0.3.0"
