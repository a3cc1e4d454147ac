//! Audio-to-expression prediction: audio front-end, biased cross-attention
//! transformer, autoregressive inference and training.

mod attention;
mod frontend;
mod model;

pub use attention::{
    alibi_bias_matrix, biased_cross_attention, causal_mask, multi_head_attention, positional_encoding, Attention,
};
pub use frontend::{
    audio_frontend, frame_count, hann_window, hz_to_mel, mel_band_edges, mel_filterbank, mel_to_hz, resample_linear,
    AudioFeatures, FFT_SIZE, HOP, LOG_EPS, MEL_HIGH_HZ, MEL_LOW_HZ, N_MELS, SAMPLE_RATE, WINDOW,
};
pub use model::{teacher_history, train_a2ep, A2epConfig, A2epModel, A2epSample, A2epTrainConfig, PreparedSample};

#[cfg(test)]
mod tests;
