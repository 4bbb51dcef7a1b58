//! Gated recurrent cell. Gate rows in the weight matrix are ordered
//! input, forget, output, candidate; each row acts on `[x, h]`.

use serde::{Deserialize, Serialize};

use super::conv::dot;
use super::Tensor;
use crate::error::{Error, Result};

/// Hidden and cell vectors of one LSTM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(units: usize) -> Self {
        Self {
            h: vec![0.0; units],
            c: vec![0.0; units],
        }
    }

    pub fn units(&self) -> usize {
        self.h.len()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct StepCache {
    xh: Vec<f64>,
    /// activated gates: i, f, o, g
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

fn step_impl(
    x: &[f64],
    state: &LstmState,
    weight: &Tensor,
    bias: &Tensor,
) -> (LstmState, StepCache) {
    let units = state.units();
    let width = x.len() + units;
    let mut xh = Vec::with_capacity(width);
    xh.extend_from_slice(x);
    xh.extend_from_slice(&state.h);
    let wd = weight.data();
    let bd = bias.data();
    let mut gates = vec![0.0; 4 * units];
    for (r, gate) in gates.iter_mut().enumerate() {
        let z = bd[r] + dot(&wd[r * width..(r + 1) * width], &xh);
        *gate = if r < 3 * units { sigmoid(z) } else { z.tanh() };
    }
    let mut c = vec![0.0; units];
    let mut h = vec![0.0; units];
    let mut tanh_c = vec![0.0; units];
    for u in 0..units {
        let (i, f, o, g) = (
            gates[u],
            gates[units + u],
            gates[2 * units + u],
            gates[3 * units + u],
        );
        c[u] = f * state.c[u] + i * g;
        tanh_c[u] = c[u].tanh();
        h[u] = o * tanh_c[u];
    }
    let cache = StepCache {
        xh,
        gates,
        c_prev: state.c.clone(),
        tanh_c,
    };
    (LstmState { h, c }, cache)
}

fn check_dims(x_len: usize, units: usize, weight: &Tensor, bias: &Tensor) -> Result<()> {
    let expected_w = [4 * units, x_len + units];
    if weight.shape() != expected_w {
        return Err(Error::shape(expected_w, weight.shape()));
    }
    if bias.shape() != [4 * units] {
        return Err(Error::shape([4 * units], bias.shape()));
    }
    Ok(())
}

/// One recurrence step: returns the new hidden output and state.
pub fn lstm_step(
    x: &[f64],
    state: &LstmState,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(Vec<f64>, LstmState)> {
    if state.h.len() != state.c.len() {
        return Err(Error::shape(state.h.len(), state.c.len()));
    }
    check_dims(x.len(), state.units(), weight, bias)?;
    let (next, _) = step_impl(x, state, weight, bias);
    Ok((next.h.clone(), next))
}

/// Run a [N, T, In] sequence from zero state.
pub(crate) fn sequence_forward(
    x: &Tensor,
    units: usize,
    return_sequences: bool,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Vec<Vec<StepCache>>)> {
    let (n, t, inputs) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    check_dims(inputs, units, weight, bias)?;
    let out_shape: Vec<usize> = if return_sequences {
        vec![n, t, units]
    } else {
        vec![n, units]
    };
    let mut out = Tensor::zeros(&out_shape);
    let mut caches = Vec::with_capacity(n);
    for s in 0..n {
        let mut state = LstmState::zeros(units);
        let mut steps = Vec::with_capacity(t);
        for k in 0..t {
            let xs = &x.data()[(s * t + k) * inputs..(s * t + k + 1) * inputs];
            let (next, cache) = step_impl(xs, &state, weight, bias);
            if return_sequences {
                out.data_mut()[(s * t + k) * units..(s * t + k + 1) * units]
                    .copy_from_slice(&next.h);
            }
            state = next;
            steps.push(cache);
        }
        if !return_sequences {
            out.data_mut()[s * units..(s + 1) * units].copy_from_slice(&state.h);
        }
        caches.push(steps);
    }
    Ok((out, caches))
}

/// Backpropagation through time for [`sequence_forward`].
pub(crate) fn sequence_backward(
    caches: &[Vec<StepCache>],
    inputs: usize,
    units: usize,
    return_sequences: bool,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = caches.len();
    let t = caches.first().map_or(0, |c| c.len());
    let width = inputs + units;
    let mut dx = Tensor::zeros(&[n, t, inputs]);
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[4 * units]);
    let wd = weight.data();
    let go = grad_out.data();
    let mut dz = vec![0.0; 4 * units];
    let mut dxh = vec![0.0; width];
    for (s, steps) in caches.iter().enumerate() {
        let mut dh_next = vec![0.0; units];
        let mut dc_next = vec![0.0; units];
        if !return_sequences {
            dh_next.copy_from_slice(&go[s * units..(s + 1) * units]);
        }
        for k in (0..t).rev() {
            let sc = &steps[k];
            for u in 0..units {
                let dh = dh_next[u]
                    + if return_sequences {
                        go[(s * t + k) * units + u]
                    } else {
                        0.0
                    };
                let (i, f, o, g) = (
                    sc.gates[u],
                    sc.gates[units + u],
                    sc.gates[2 * units + u],
                    sc.gates[3 * units + u],
                );
                let tc = sc.tanh_c[u];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[u];
                dz[u] = dc * g * i * (1.0 - i);
                dz[units + u] = dc * sc.c_prev[u] * f * (1.0 - f);
                dz[2 * units + u] = dh * tc * o * (1.0 - o);
                dz[3 * units + u] = dc * i * (1.0 - g * g);
                dc_next[u] = dc * f;
            }
            dxh.fill(0.0);
            {
                let dwd = dw.data_mut();
                for (r, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut dwd[r * width..(r + 1) * width];
                    for (wv, xv) in row.iter_mut().zip(&sc.xh) {
                        *wv += d * xv;
                    }
                    for (acc, wv) in dxh.iter_mut().zip(&wd[r * width..(r + 1) * width]) {
                        *acc += d * wv;
                    }
                }
            }
            for (b, d) in db.data_mut().iter_mut().zip(&dz) {
                *b += d;
            }
            dx.data_mut()[(s * t + k) * inputs..(s * t + k + 1) * inputs]
                .copy_from_slice(&dxh[..inputs]);
            dh_next.copy_from_slice(&dxh[inputs..]);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_zero_state_stay_zero() {
        let w = Tensor::zeros(&[8, 5]);
        let b = Tensor::zeros(&[8]);
        let (h, st) = lstm_step(&[0.3, -1.0, 2.0], &LstmState::zeros(2), &w, &b).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(st.c, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_drops_cell() {
        // one unit, one input; forget bias -20, everything else zero
        let w = Tensor::zeros(&[4, 2]);
        let mut b = Tensor::zeros(&[4]);
        b.data_mut()[1] = -20.0;
        let state = LstmState {
            h: vec![0.0],
            c: vec![1.0],
        };
        let (_, next) = lstm_step(&[0.7], &state, &w, &b).unwrap();
        // candidate tanh(0) = 0, so c' = sigma(-20) * 1
        assert!(next.c[0].abs() < 1e-8, "{}", next.c[0]);
    }

    #[test]
    fn output_lengths_equal_units() {
        let w = Tensor::filled(&[12, 7], 0.1);
        let b = Tensor::zeros(&[12]);
        let (h, st) = lstm_step(&[1.0; 4], &LstmState::zeros(3), &w, &b).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(st.c.len(), 3);
        assert!(lstm_step(&[1.0; 5], &LstmState::zeros(3), &w, &b).is_err());
    }
}
