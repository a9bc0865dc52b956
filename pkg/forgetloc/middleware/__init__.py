# Middleware