//! Image model: tiles, augmentation, the convolutional regressor and its training loop.

pub mod augment;
pub mod checkpoint;
pub mod net;
pub mod tile;
pub mod train;

pub use augment::{augment, AugmentParams};
pub use net::{backward, poisson_nll, Arch, ConvRegressor, Forward, Params, Scalar, TENSOR_NAMES};
pub use tile::{decode_png_rgb8, encode_png_gray8, encode_png_rgb8, resize_bilinear, ImageTile, CHANNELS};
pub use train::{
    evaluate, examples_for, extract_embeddings, import_embeddings, mean_loss, mean_rate, pearson_r, predict_county,
    predict_tiles, train, write_embeddings, write_predictions, write_training_log, EpochLog, Embeddings,
    EvalReport, Example, PredictionRecord, TrainConfig, TrainOutcome,
};
