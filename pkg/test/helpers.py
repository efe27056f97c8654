import numpy as np

# two universities (rows), groups A and B (columns)
TOY_PREDICTIONS = {
    (0, 0): [[0.10, 0.20], [0.05, 0.10]],
    (1, 0): [[0.20, 0.30], [0.10, 0.125]],
    (0, 1): [[0.15, 0.25], [0.15, 0.15]],
    (1, 1): [[0.20, 0.30], [0.15, 0.15]],
}
TOY_ACROSS_DISPARITY = {
    (0, 0): 0.16 - 13.75 / 175,
    (1, 0): 0.23 - 27.5 / 175,
    (0, 1): 0.06,
    (1, 1): 0.24 - 31.25 / 175,
}
TOY_AGGREGATE = {
    (0, 0): 53.75 / 425,
    (1, 0): 85.0 / 425,
    (0, 1): 78.75 / 425,
    (1, 1): 91.25 / 425,
}


def all_interventions(m, b=None):
    """Every 0/1 vector of length m with at most b ones, in lexicographic order."""
    b = m if b is None else b
    grid = np.array(np.meshgrid(*[[0, 1]] * m, indexing="ij")).reshape(m, -1).T
    return [z for z in grid if z.sum() <= b]
