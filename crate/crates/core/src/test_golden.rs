//! Frozen reference values computed offline with 50-digit arithmetic.

/// Softmax of the seed-7 logit draw (H=1, M=4, N=3, d=2), row-major.
pub const SOFTMAX_SEED7: [f64; 12] = [
    0.081934946525473803237,
    0.085556070931164581204,
    0.83250898254336161556,
    0.55628853627502815462,
    0.32665706087332124748,
    0.1170544028516505979,
    0.033209425100680228742,
    0.8572020896760931629,
    0.10958848522322660835,
    0.89958891505517963648,
    0.031543788371273243279,
    0.068867296573547120246,
];
