"""mugid: retrieve the source of a manipulated image from an enrolled gallery.

Local scale-invariant keypoints are matched with a nearest-neighbor ratio
test and verified by angle/length-ratio statistics over point triples; an
eigenface nearest-neighbor baseline is trained on the same gallery for
side-by-side comparison.
"""

from .eigenfaces import EigenModel, pca_identify, project, train_eigenmodel
from .evaluation import (BenchmarkReport, ManipulationSpec, cmc_curve,
                         identification_rate, run_benchmark,
                         synthesize_manipulation)
from .gallery import (GalleryIndex, RankedResult, enroll, identify,
                      identify_image, load_index, save_index)
from .imaging import (GrayImage, Overlay, gaussian_blur, load_image,
                      resize_bilinear, save_image, save_visualization)
from .matching import (AlrAttributes, MatchPair, MatchParams, VerifiedMatches,
                       alr_attributes, ratio_match, triple_consistent,
                       verify_matches)
from .sift import (FeatureSet, Keypoint, ScaleSpace, SiftParams,
                   build_scale_space, compute_descriptors, compute_gradients,
                   detect_keypoints, extract_features)

__version__ = "0.1.0"

__all__ = [
    "GrayImage", "Overlay", "load_image", "save_image", "resize_bilinear",
    "gaussian_blur", "save_visualization",
    "SiftParams", "ScaleSpace", "Keypoint", "FeatureSet", "build_scale_space",
    "detect_keypoints", "compute_gradients", "compute_descriptors",
    "extract_features",
    "MatchParams", "MatchPair", "AlrAttributes", "VerifiedMatches",
    "ratio_match", "alr_attributes", "triple_consistent", "verify_matches",
    "EigenModel", "train_eigenmodel", "project", "pca_identify",
    "GalleryIndex", "RankedResult", "enroll", "save_index", "load_index",
    "identify", "identify_image",
    "ManipulationSpec", "BenchmarkReport", "synthesize_manipulation",
    "identification_rate", "cmc_curve", "run_benchmark",
]
