from .features import (FeatureVector, InsufficientHistoryError, extract_features,
                       feature_length, feature_tensor, multires_centers, rbf_embed, unflatten)
from .nn import QuantileNet, TrainingDivergedError, pinball_loss, train
from .predictors import (Climatology, ExternalPredictions, Persistence, PredictContext,
                         Predictor, RbfConfig, RbfQuantile, Ridge, RidgeSolverError, TrainData,
                         make_predictor, ridge_fit)
