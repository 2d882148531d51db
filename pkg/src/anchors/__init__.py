from src.anchors.assign import GridSpec, anchor_ranking, assign_responsible
from src.anchors.kmeans import AnchorPrior, AnchorSet, KMeansResult, kmeans_anchors, kmeans_fit
