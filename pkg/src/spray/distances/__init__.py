"""Dissimilarities between attribution maps: euclidean, entropic Wasserstein and
entropic Gromov-Wasserstein, plus grid barycenters."""

from .barycenter import (
    chebyshev_interpolation_weights,
    euclidean_barycenter,
    wasserstein_barycenter,
)
from .gromov import gromov_wasserstein, gw_loss
from .matrix import (
    DistanceParams,
    canonical_metric,
    pairwise_distance_matrix,
    pairwise_euclidean,
    read_dst,
    write_dst,
)
from .measures import (
    METRICS,
    DegenerateMeasureError,
    DistanceMatrix,
    PointCloud,
    extract_points,
    grid_coordinates,
    grid_cost,
    to_measure,
)
from .sinkhorn import ConvergenceWarning, TransportPlan, sinkhorn, wasserstein_distance
