use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for one parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, alpha: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            step_count: 0,
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One in-place Adam step over `params` using `grads`.
pub fn adam_update(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(state.m.len(), (params.len(), grads.len())));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(p.shape(), g.shape()));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= state.alpha * mh / (vh.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(g: f64) -> (f64, AdamState) {
        let mut p = Tensor::from_vec(vec![0.5]);
        let mut st = AdamState::new([&p], 1e-3);
        adam_update(&mut [&mut p], &[Tensor::from_vec(vec![g])], &mut st).unwrap();
        (p.data()[0], st)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (p, st) = one_step(0.0);
        assert_eq!(p, 0.5);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_is_alpha_regardless_of_scale() {
        for g in [1.0, 100.0, 1e-3] {
            let (p, _) = one_step(g);
            assert!((0.5 - p - 0.001).abs() < 1e-6, "{g}: {p}");
        }
        let (p, _) = one_step(-1.0);
        assert!((p - 0.501).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::from_vec(vec![0.0, 1.0]);
        let mut st = AdamState::new([&p], 1e-3);
        assert!(adam_update(&mut [&mut p], &[Tensor::from_vec(vec![1.0])], &mut st).is_err());
        assert_eq!(st.step_count, 0);
    }
}
