# Config