"""Block-sparse matrices and the SDD/DSD/DDS product family."""
