use rand::Rng;

/// One LSTM layer. Gate blocks are stacked as `[input, forget, cell, output]`,
/// each `hidden` rows tall; matrices are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub input_dim: usize,
    pub hidden: usize,
    /// `4H x D`
    pub w_input: Vec<f64>,
    /// `4H x H`
    pub w_recurrent: Vec<f64>,
    /// `4H`
    pub bias: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

impl LstmLayer {
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-bound..=bound))
                .collect::<Vec<_>>()
        };
        let w_input = uniform(4 * hidden * input_dim);
        let w_recurrent = uniform(4 * hidden * hidden);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            input_dim,
            hidden,
            w_input,
            w_recurrent,
            bias,
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            input_dim: other.input_dim,
            hidden: other.hidden,
            w_input: vec![0.0; other.w_input.len()],
            w_recurrent: vec![0.0; other.w_recurrent.len()],
            bias: vec![0.0; other.bias.len()],
        }
    }

    /// Runs the first `len` timesteps of `inputs` (`len x D`, row-major) from
    /// a zero state. `rec_mask` scales the previous hidden state before it
    /// enters the recurrent weights; the same mask is used at every step.
    pub(crate) fn forward(
        &self,
        inputs: Vec<f64>,
        len: usize,
        rec_mask: Option<Vec<f64>>,
    ) -> LstmTrace {
        let (d, h) = (self.input_dim, self.hidden);
        debug_assert_eq!(inputs.len(), len * d);
        let mut trace = LstmTrace {
            len,
            hidden: h,
            inputs,
            h: vec![0.0; len * h],
            c: vec![0.0; len * h],
            gates: vec![0.0; len * 4 * h],
            rec_mask,
        };
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];
        for t in 0..len {
            if let Some(m) = &trace.rec_mask {
                h_prev.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
            }
            let x = &trace.inputs[t * d..(t + 1) * d];
            for (r, zr) in z.iter_mut().enumerate() {
                *zr = self.bias[r]
                    + dot(&self.w_input[r * d..(r + 1) * d], x)
                    + dot(&self.w_recurrent[r * h..(r + 1) * h], &h_prev);
            }
            let gates = &mut trace.gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                let c = f * c_prev[j] + i * g;
                gates[j] = i;
                gates[h + j] = f;
                gates[2 * h + j] = g;
                gates[3 * h + j] = o;
                trace.c[t * h + j] = c;
                trace.h[t * h + j] = o * c.tanh();
            }
            h_prev.copy_from_slice(&trace.h[t * h..(t + 1) * h]);
            c_prev.copy_from_slice(&trace.c[t * h..(t + 1) * h]);
        }
        trace
    }

    /// Backpropagation through time. `dh_out` is the loss gradient with
    /// respect to each emitted hidden state (`len x H`). Parameter gradients
    /// are added into `grads`; returns the gradient with respect to the
    /// inputs (`len x D`) when `want_input_grad` is set.
    pub(crate) fn backward(
        &self,
        trace: &LstmTrace,
        dh_out: &[f64],
        grads: &mut LstmLayer,
        want_input_grad: bool,
    ) -> Vec<f64> {
        let (d, h, len) = (self.input_dim, self.hidden, trace.len);
        let mut dx = if want_input_grad {
            vec![0.0; len * d]
        } else {
            Vec::new()
        };
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut h_prev_masked = vec![0.0; h];
        let mut dh_prev_masked = vec![0.0; h];
        for t in (0..len).rev() {
            let gates = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let c = trace.c[t * h + j];
                let c_prev = if t > 0 { trace.c[(t - 1) * h + j] } else { 0.0 };
                let tc = c.tanh();
                let dh = dh_out[t * h + j] + dh_next[j];
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                dz[j] = dc * g * i * (1.0 - i);
                dz[h + j] = dc * c_prev * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - g * g);
                dz[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            if t > 0 {
                h_prev_masked.copy_from_slice(&trace.h[(t - 1) * h..t * h]);
                if let Some(m) = &trace.rec_mask {
                    h_prev_masked.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
                }
            } else {
                h_prev_masked.fill(0.0);
            }
            let x = &trace.inputs[t * d..(t + 1) * d];
            dh_prev_masked.fill(0.0);
            for (r, &dzr) in dz.iter().enumerate() {
                grads.bias[r] += dzr;
                axpy(dzr, x, &mut grads.w_input[r * d..(r + 1) * d]);
                if t > 0 {
                    axpy(
                        dzr,
                        &h_prev_masked,
                        &mut grads.w_recurrent[r * h..(r + 1) * h],
                    );
                    axpy(
                        dzr,
                        &self.w_recurrent[r * h..(r + 1) * h],
                        &mut dh_prev_masked,
                    );
                }
                if want_input_grad {
                    axpy(
                        dzr,
                        &self.w_input[r * d..(r + 1) * d],
                        &mut dx[t * d..(t + 1) * d],
                    );
                }
            }
            dh_next.copy_from_slice(&dh_prev_masked);
            if let Some(m) = &trace.rec_mask {
                dh_next.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
            }
        }
        dx
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct LstmTrace {
    pub len: usize,
    pub hidden: usize,
    pub inputs: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    /// Post-activation gate values, `len x 4H`.
    pub gates: Vec<f64>,
    pub rec_mask: Option<Vec<f64>>,
}

impl LstmTrace {
    pub fn last_hidden(&self) -> &[f64] {
        &self.h[(self.len - 1) * self.hidden..self.len * self.hidden]
    }

    pub fn mean_hidden(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.hidden];
        for row in self.h[..self.len * self.hidden].chunks_exact(self.hidden) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= self.len as f64);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Textbook single LSTM step from a zero state, written out per gate.
    fn single_step_oracle(layer: &LstmLayer, x: &[f64]) -> Vec<f64> {
        let h = layer.hidden;
        let d = layer.input_dim;
        let pre = |gate: usize, j: usize| {
            let r = gate * h + j;
            layer.bias[r] + (0..d).map(|k| layer.w_input[r * d + k] * x[k]).sum::<f64>()
        };
        (0..h)
            .map(|j| {
                let i = 1.0 / (1.0 + (-pre(0, j)).exp());
                let g = pre(2, j).tanh();
                let o = 1.0 / (1.0 + (-pre(3, j)).exp());
                o * (i * g).tanh()
            })
            .collect()
    }

    #[test]
    fn one_step_matches_textbook_cell() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let layer = LstmLayer::init(5, 4, &mut rng);
        let x = [0.3, 0.1, -0.2, 0.5, 0.05];
        let trace = layer.forward(x.to_vec(), 1, None);
        let oracle = single_step_oracle(&layer, &x);
        for (a, b) in trace.last_hidden().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
