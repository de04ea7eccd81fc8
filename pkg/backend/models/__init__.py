# Models Package 