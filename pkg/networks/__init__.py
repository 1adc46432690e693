"""Networks package for the encoder, codebook, decoder, renderer and token transformer."""
