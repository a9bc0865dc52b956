# Models