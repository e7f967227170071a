//! Rectified-flow interpolation, training objective, and Euler ODE sampling.
//!
//! Convention: the interpolation z_t = (1-t) z1 + t z0 places noise at t=0
//! and data at t=1, and sampling integrates dz/dt = v(z, t) from t=0 to t=1
//! starting at the noise endpoint.

use crate::error::{Error, Result};
use crate::tensor::LatentVideo;

/// Linear path between a data latent (z0) and a noise latent (z1).
#[derive(Debug, Clone)]
pub struct FlowPath {
    pub z0: LatentVideo,
    pub z1: LatentVideo,
}

impl FlowPath {
    pub fn new(z0: LatentVideo, z1: LatentVideo) -> Result<Self> {
        if !z0.same_shape(&z1) {
            return Err(Error::Shape("flow endpoints differ in shape".into()));
        }
        Ok(FlowPath { z0, z1 })
    }

    /// Ground-truth constant velocity z0 - z1.
    pub fn target_velocity(&self) -> LatentVideo {
        let t = self
            .z0
            .tensor
            .zip(&self.z1.tensor, |a, b| a - b)
            .expect("same shape");
        LatentVideo::new(t).expect("same shape")
    }
}

/// Anything that evaluates a velocity field v(z, t). Conditioning is
/// captured by the implementor.
pub trait VelocityField {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<LatentVideo>;
}

impl<F> VelocityField for F
where
    F: Fn(&LatentVideo, f64) -> Result<LatentVideo>,
{
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<LatentVideo> {
        self(z, t)
    }
}

/// z_t = (1-t) z1 + t z0.
pub fn interpolate(path: &FlowPath, t: f64) -> Result<LatentVideo> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("t={t} outside [0,1]")));
    }
    let tensor = path
        .z1
        .tensor
        .zip(&path.z0.tensor, |n, d| (1.0 - t) * n + t * d)?;
    LatentVideo::new(tensor)
}

/// Mean squared error between the model's predicted velocity at z_t and
/// the path's constant target velocity.
pub fn rf_loss(model: &dyn VelocityField, path: &FlowPath, t: f64) -> Result<f64> {
    let z_t = interpolate(path, t)?;
    let pred = model.velocity(&z_t, t)?;
    if !pred.same_shape(&path.z0) {
        return Err(Error::Shape("model output shape != latent shape".into()));
    }
    let target = path.target_velocity();
    let n = pred.tensor.len() as f64;
    let sum: f64 = pred
        .tensor
        .data()
        .iter()
        .zip(target.tensor.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Euler integration of dz/dt = v(z, t) from t=0 (noise) to t=1 (data)
/// with uniform step 1/steps.
pub fn euler_sample(
    model: &dyn VelocityField,
    z1: &LatentVideo,
    steps: usize,
) -> Result<LatentVideo> {
    euler_sample_with(model, z1, steps, |_, _| {})
}

/// Euler sampling with a per-step observer (used by the profiling CLI to
/// inspect intermediate states). The observer sees (step index, state
/// before the step).
pub fn euler_sample_with(
    model: &dyn VelocityField,
    z1: &LatentVideo,
    steps: usize,
    mut observe: impl FnMut(usize, &LatentVideo),
) -> Result<LatentVideo> {
    if steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1.clone();
    for k in 0..steps {
        observe(k, &z);
        let t = k as f64 * dt;
        let v = model.velocity(&z, t)?;
        if !v.same_shape(&z) {
            return Err(Error::Shape("velocity shape != state shape".into()));
        }
        let next = z.tensor.zip(&v.tensor, |zi, vi| zi + dt * vi);
        z = match next {
            Ok(t) => LatentVideo::new(t)?,
            Err(Error::Numeric(_)) => {
                return Err(Error::Numeric(format!("non-finite state at step {k}")))
            }
            Err(e) => return Err(e),
        };
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn scalar_latent(v: f64) -> LatentVideo {
        LatentVideo::new(crate::tensor::Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()).unwrap()
    }

    fn random_path(seed: u64) -> FlowPath {
        let mut rng = Rng::new(seed);
        let z0 = LatentVideo::random_normal(2, 2, 2, 2, &mut rng).unwrap();
        let z1 = LatentVideo::random_normal(2, 2, 2, 2, &mut rng).unwrap();
        FlowPath::new(z0, z1).unwrap()
    }

    #[test]
    fn interpolate_endpoints() {
        let path = random_path(1);
        assert_eq!(interpolate(&path, 1.0).unwrap(), path.z0);
        assert_eq!(interpolate(&path, 0.0).unwrap(), path.z1);
    }

    #[test]
    fn interpolate_midpoint_scalar() {
        let path = FlowPath::new(scalar_latent(2.0), scalar_latent(0.0)).unwrap();
        assert_eq!(interpolate(&path, 0.5).unwrap().tensor.data()[0], 1.0);
    }

    #[test]
    fn interpolate_rejects_out_of_range_t() {
        let path = random_path(2);
        assert!(interpolate(&path, -0.1).is_err());
        assert!(interpolate(&path, 1.1).is_err());
    }

    #[test]
    fn interpolate_affine_in_t() {
        let path = random_path(3);
        for &t in &[0.1, 0.33, 0.5, 0.9] {
            let z_t = interpolate(&path, t).unwrap();
            for i in 0..z_t.tensor.len() {
                let z1 = path.z1.tensor.data()[i];
                let z0 = path.z0.tensor.data()[i];
                let expect = z1 + t * (z0 - z1);
                assert!((z_t.tensor.data()[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rf_loss_zero_for_perfect_predictor() {
        let path = random_path(4);
        let target = path.target_velocity();
        let model = move |_: &LatentVideo, _: f64| Ok(target.clone());
        assert_eq!(rf_loss(&model, &path, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn rf_loss_mean_of_squared_ones() {
        // z0 - z1 = all-ones over 8 entries, model = 0 -> loss = 1.0
        let z1 = LatentVideo::zeros(2, 2, 2, 1).unwrap();
        let z0 = LatentVideo::new(z1.tensor.map(|_| 1.0).unwrap()).unwrap();
        let path = FlowPath::new(z0, z1).unwrap();
        let model = |z: &LatentVideo, _: f64| LatentVideo::new(z.tensor.map(|_| 0.0)?);
        assert_eq!(rf_loss(&model, &path, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn euler_exact_for_constant_field() {
        let path = random_path(5);
        let target = path.target_velocity();
        let model = move |_: &LatentVideo, _: f64| Ok(target.clone());
        for &steps in &[1usize, 7, 100] {
            let out = euler_sample(&model, &path.z1, steps).unwrap();
            for (a, b) in out.tensor.data().iter().zip(path.z0.tensor.data()) {
                assert!((a - b).abs() <= 1e-12, "steps={steps}");
            }
        }
    }

    #[test]
    fn euler_zero_field_identity() {
        let path = random_path(6);
        let model = |z: &LatentVideo, _: f64| LatentVideo::new(z.tensor.map(|_| 0.0)?);
        let out = euler_sample(&model, &path.z1, 13).unwrap();
        assert_eq!(out, path.z1);
    }

    #[test]
    fn euler_time_dependent_field_converges() {
        // v(z, t) = t from z=0: exact z(1) = 1/2.
        let model = |z: &LatentVideo, t: f64| LatentVideo::new(z.tensor.map(|_| t)?);
        let z1 = scalar_latent(0.0);
        let out = euler_sample(&model, &z1, 1000).unwrap();
        assert!((out.tensor.data()[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn euler_first_order_convergence() {
        let model = |z: &LatentVideo, t: f64| LatentVideo::new(z.tensor.map(|_| t)?);
        let z1 = scalar_latent(0.0);
        let err = |steps: usize| {
            let out = euler_sample(&model, &z1, steps).unwrap();
            (out.tensor.data()[0] - 0.5).abs()
        };
        let ratio = err(64) / err(128);
        assert!((1.7..=2.3).contains(&ratio), "ratio={ratio}");
    }

    #[test]
    fn euler_rejects_zero_steps() {
        let z1 = scalar_latent(0.0);
        let model = |z: &LatentVideo, _: f64| Ok(z.clone());
        assert!(euler_sample(&model, &z1, 0).is_err());
    }
}
