# Routes