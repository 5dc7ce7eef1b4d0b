"""Graph neural network trajectory prediction on highway interaction graphs."""
