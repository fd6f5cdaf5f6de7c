//! Fixed sinusoidal embeddings.

use crate::error::{Error, Result};

/// Interleaved `[sin(pos·ω₀), cos(pos·ω₀), sin(pos·ω₁), …]` with
/// `ω_i = 10000^(−2i/d)`.
pub fn sinusoidal(pos: f64, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::Invalid(format!("sinusoidal width {d} must be even")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / d as f64);
        let a = pos * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Position embedding for an index below `limit`.
pub fn sinusoidal_pe(pos: usize, limit: usize, d: usize) -> Result<Vec<f64>> {
    if pos >= limit {
        return Err(Error::OutOfRange {
            what: "position",
            index: pos,
            limit,
        });
    }
    sinusoidal(pos as f64, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin0_cos0() {
        let v = sinusoidal(0.0, 6).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn closed_form_at_one() {
        let v = sinusoidal(1.0, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((v[0] - 0.84147).abs() < 1e-5);
        assert!((v[1] - 0.54030).abs() < 1e-5);
        assert!((v[2] - 0.01000).abs() < 1e-5);
        assert!((v[3] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal(1.0, 5).is_err());
    }

    #[test]
    fn positions_are_pairwise_distinct() {
        let d = 32;
        let pes: Vec<Vec<f64>> = (0..57).map(|p| sinusoidal_pe(p, 57, d).unwrap()).collect();
        for i in 0..pes.len() {
            for j in i + 1..pes.len() {
                let dist: f64 = pes[i].iter().zip(&pes[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(dist > 1e-6, "{i} vs {j}");
            }
        }
        assert!(sinusoidal_pe(57, 57, d).is_err());
    }
}
