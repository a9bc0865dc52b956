# Engine
