# Emotive glyph guided diffusion
