//! The linear transport path between data and noise.

use cost_tensor::Tensor;

use super::schedule::Schedule;
use crate::error::{Error, Result};

fn check_s(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::Timestep(s))
    }
}

/// `x_s = (1 − s)·x0 + s·x1`.
pub fn interpolate(x0: &Tensor<f32>, x1: &Tensor<f32>, s: f64) -> Result<Tensor<f32>> {
    check_s(s)?;
    let s = s as f32;
    Ok(x0.zip_map(x1, "interpolate", |a, b| (1.0 - s) * a + s * b)?)
}

/// Velocity of the linear path, `x1 − x0`.
pub fn velocity_target(x0: &Tensor<f32>, x1: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(x0.zip_map(x1, "velocity_target", |a, b| b - a)?)
}

/// Clean-state estimate `x_s − σ(s)·v̂`.
pub fn estimate_x0(x_s: &Tensor<f32>, v_hat: &Tensor<f32>, s: f64) -> Result<Tensor<f32>> {
    check_s(s)?;
    let sigma = Schedule::sigma(s) as f32;
    Ok(x_s.zip_map(v_hat, "estimate_x0", |x, v| x - sigma * v)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn endpoints_and_arithmetic() {
        let (a, b) = (t(&[1.5, -2.0]), t(&[0.25, 7.0]));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate(&t(&[0.0]), &t(&[2.0]), 0.25).unwrap().data(), &[0.5]);
        assert_eq!(velocity_target(&a, &a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(velocity_target(&t(&[0.0]), &t(&[3.0])).unwrap().data(), &[3.0]);
        assert_eq!(estimate_x0(&t(&[2.0]), &t(&[1.0]), 0.5).unwrap().data(), &[1.5]);
        assert_eq!(estimate_x0(&a, &b, 0.0).unwrap(), a);
    }

    #[test]
    fn shape_and_range_errors() {
        assert!(interpolate(&t(&[1.0]), &t(&[1.0, 2.0]), 0.5).is_err());
        assert!(interpolate(&t(&[1.0]), &t(&[1.0]), 1.5).is_err());
        assert!(velocity_target(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
        assert!(estimate_x0(&t(&[1.0]), &t(&[1.0]), -0.1).is_err());
    }
}
