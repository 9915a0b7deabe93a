use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub config: AdamConfig,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Self {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()).expect("param shape"))
            .collect();
        Self {
            step_count: 0,
            v: m.clone(),
            m,
            config,
        }
    }
}

/// One bias-corrected Adam update over `params`, in order.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::Invalid(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        p.expect_same_shape(g, "adam_step")?;
        p.expect_same_shape(m, "adam_step")?;
    }
    state.step_count += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step = T::from_f64_lossy(lr / bc1);
    let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
    let eps = T::from_f64_lossy(eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let mi = b1 * m.data()[i] + one_b1 * gi;
            let vi = b2 * v.data()[i] + one_b2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            pd[i] = pd[i] - step * mi / (vi.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new([3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros([3]).unwrap();
        let mut st = AdamState::new([&p], AdamConfig::default());
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_descends() {
        let mut p = Tensor::scalar(1.0f64);
        let g = Tensor::scalar(1.0);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut st = AdamState::new([&p], cfg);
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert!(p.item().unwrap() < 1.0);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = Tensor::scalar(1.0f64);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut st = AdamState::new([&p], cfg);
        for k in 0..100 {
            let g = Tensor::scalar(2.0 * p.item().unwrap());
            adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
            assert_eq!(st.step_count, k + 1);
        }
        assert!(p.item().unwrap().abs() < 0.1, "p = {}", p.item().unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f32>::zeros([2]).unwrap();
        let g = Tensor::zeros([3]).unwrap();
        let mut st = AdamState::new([&p], AdamConfig::default());
        assert!(adam_step(&mut [&mut p], &[&g], &mut st).is_err());
    }
}
