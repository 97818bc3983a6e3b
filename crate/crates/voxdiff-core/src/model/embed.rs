//! Sinusoidal timestep embedding.

use super::ModelError;

/// First `d/2` entries are `sin(n * w_k)`, last `d/2` are `cos(n * w_k)`,
/// with `w_k = max_period^(-k / (d/2 - 1))` so `w_0 = 1`.
pub fn sinusoidal_embed(n: usize, d: usize, max_period: f64) -> Result<Vec<f64>, ModelError> {
    if d == 0 || d % 2 != 0 {
        return Err(ModelError::Config(format!(
            "embedding dimension must be even and positive, got {d}"
        )));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            max_period.powf(-(k as f64) / (half as f64 - 1.0))
        };
        let arg = n as f64 * omega;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(out)
}
