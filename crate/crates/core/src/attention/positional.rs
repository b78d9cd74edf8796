use crate::error::{MlaError, Result};
use crate::linalg::Matrix;

/// Fixed sinusoidal table. Row `p`, subspace `k` holds `sin(p·ω_k)` at
/// column `2k` and `cos(p·ω_k)` at `2k+1`, with `ω_k = 10000^(−2k/d_model)`.
pub fn sinusoidal_embedding(max_pos: usize, d_model: usize) -> Result<Matrix> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(MlaError::arg(format!(
            "sinusoidal embedding needs an even width, got {d_model}"
        )));
    }
    Ok(Matrix::from_fn(max_pos, d_model, |p, c| {
        let k = c / 2;
        let omega = 10000f64.powf(-2.0 * k as f64 / d_model as f64);
        let angle = p as f64 * omega;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero() {
        let e = sinusoidal_embedding(3, 8).unwrap();
        for k in 0..4 {
            assert_eq!(e[(0, 2 * k)], 0.0);
            assert_eq!(e[(0, 2 * k + 1)], 1.0);
        }
    }

    #[test]
    fn unit_frequency_pair() {
        let e = sinusoidal_embedding(2, 2).unwrap();
        assert_eq!(e.row(1), &[1f64.sin(), 1f64.cos()]);
    }

    #[test]
    fn bounded() {
        let e = sinusoidal_embedding(200, 64).unwrap();
        assert!(e.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal_embedding(4, 7).is_err());
    }
}
