//! Gated recurrent context aggregator (standard LSTM cell equations).
//!
//! Gate layout in the stacked weight matrices is `[input, forget, cell, output]`.

use rand::Rng;

use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub(crate) input_dim: usize,
    pub(crate) hidden: usize,
    /// `4H × F`, row-major.
    pub(crate) w_ih: Vec<f64>,
    /// `4H × H`, row-major.
    pub(crate) w_hh: Vec<f64>,
    pub(crate) bias: Vec<f64>,
    /// Learned initial hidden state; also the context of the first position.
    pub(crate) h0: Vec<f64>,
    pub(crate) c0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Activations kept from a forward step for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates, `[i, f, g, o]` stacked.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmCell {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            w_ih: vec![0.0; 4 * hidden * input_dim],
            w_hh: vec![0.0; 4 * hidden * hidden],
            bias: vec![0.0; 4 * hidden],
            h0: vec![0.0; hidden],
            c0: vec![0.0; hidden],
        }
    }

    /// Uniform weights in `±scale/√H`, zero biases and initial state.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let mut cell = Self::zeros(input_dim, hidden);
        let bound = scale / (hidden as f64).sqrt();
        for w in cell.w_ih.iter_mut().chain(cell.w_hh.iter_mut()) {
            *w = rng.random_range(-bound..bound);
        }
        cell
    }

    /// Every parameter, including bias and initial state, as standard normal
    /// draws times `scale`. Used to build arbitrary models for tests.
    pub fn random_dense<R: Rng + ?Sized>(input_dim: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let mut cell = Self::zeros(input_dim, hidden);
        for p in cell.params_mut() {
            for v in p.1 {
                *v = scale * rng::standard_normal(rng);
            }
        }
        cell
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState {
            h: self.h0.clone(),
            c: self.c0.clone(),
        }
    }

    fn preactivations(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = self.hidden;
        let mut z = self.bias.clone();
        for (r, zr) in z.iter_mut().enumerate() {
            let wi = &self.w_ih[r * self.input_dim..(r + 1) * self.input_dim];
            let wh = &self.w_hh[r * hd..(r + 1) * hd];
            let mut acc = 0.0;
            for (w, xv) in wi.iter().zip(x) {
                acc += w * xv;
            }
            for (w, hv) in wh.iter().zip(h) {
                acc += w * hv;
            }
            *zr += acc;
        }
        z
    }

    fn activate(&self, pre: &mut [f64]) {
        let hd = self.hidden;
        for (r, v) in pre.iter_mut().enumerate() {
            *v = if (2 * hd..3 * hd).contains(&r) {
                v.tanh()
            } else {
                sigmoid(*v)
            };
        }
    }

    pub fn step(&self, x: &[f64], state: &LstmState) -> LstmState {
        let hd = self.hidden;
        let mut gates = self.preactivations(x, &state.h);
        self.activate(&mut gates);
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for u in 0..hd {
            let (i, f, g, o) = (gates[u], gates[hd + u], gates[2 * hd + u], gates[3 * hd + u]);
            c[u] = f * state.c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        LstmState { h, c }
    }

    pub(crate) fn step_cached(&self, x: &[f64], state: &LstmState) -> (LstmState, StepCache) {
        let hd = self.hidden;
        let mut gates = self.preactivations(x, &state.h);
        self.activate(&mut gates);
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        for u in 0..hd {
            let (i, f, g, o) = (gates[u], gates[hd + u], gates[2 * hd + u], gates[3 * hd + u]);
            c[u] = f * state.c[u] + i * g;
            tanh_c[u] = c[u].tanh();
            h[u] = o * tanh_c[u];
        }
        let cache = StepCache {
            x: x.to_vec(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            gates,
            tanh_c,
        };
        (LstmState { h, c }, cache)
    }

    /// Backward through one step. Accumulates weight gradients into `grad`
    /// and returns `(dx, dh_prev, dc_prev)`.
    pub(crate) fn step_backward(
        &self,
        cache: &StepCache,
        dh: &[f64],
        dc: &[f64],
        grad: &mut LstmCell,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let g = &cache.gates;
        let mut dpre = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for u in 0..hd {
            let (i, f, gg, o) = (g[u], g[hd + u], g[2 * hd + u], g[3 * hd + u]);
            let tc = cache.tanh_c[u];
            let dct = dc[u] + dh[u] * o * (1.0 - tc * tc);
            let d_o = dh[u] * tc;
            let d_i = dct * gg;
            let d_g = dct * i;
            let d_f = dct * cache.c_prev[u];
            dc_prev[u] = dct * f;
            dpre[u] = d_i * i * (1.0 - i);
            dpre[hd + u] = d_f * f * (1.0 - f);
            dpre[2 * hd + u] = d_g * (1.0 - gg * gg);
            dpre[3 * hd + u] = d_o * o * (1.0 - o);
        }
        let mut dx = vec![0.0; self.input_dim];
        let mut dh_prev = vec![0.0; hd];
        for (r, &dp) in dpre.iter().enumerate() {
            if dp == 0.0 {
                continue;
            }
            grad.bias[r] += dp;
            let wi = &self.w_ih[r * self.input_dim..(r + 1) * self.input_dim];
            let gwi = &mut grad.w_ih[r * self.input_dim..(r + 1) * self.input_dim];
            for k in 0..self.input_dim {
                gwi[k] += dp * cache.x[k];
                dx[k] += dp * wi[k];
            }
            let wh = &self.w_hh[r * hd..(r + 1) * hd];
            let gwh = &mut grad.w_hh[r * hd..(r + 1) * hd];
            for k in 0..hd {
                gwh[k] += dp * cache.h_prev[k];
                dh_prev[k] += dp * wh[k];
            }
        }
        (dx, dh_prev, dc_prev)
    }

    /// Contexts `c_1..c_n`: `c_1` is the initial hidden state and `c_i` is
    /// the hidden output after consuming `rows[..i-1]` in order.
    pub fn contexts(&self, rows: &[&[f64]], n: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut state = self.initial_state();
        for i in 0..n {
            out.push(state.h.clone());
            if i + 1 < n {
                state = self.step(rows[i], &state);
            }
        }
        out
    }

    pub(crate) fn params(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("w_ih", &self.w_ih),
            ("w_hh", &self.w_hh),
            ("bias", &self.bias),
            ("h0", &self.h0),
            ("c0", &self.c0),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut [f64]); 5] {
        [
            ("w_ih", &mut self.w_ih),
            ("w_hh", &mut self.w_hh),
            ("bias", &mut self.bias),
            ("h0", &mut self.h0),
            ("c0", &mut self.c0),
        ]
    }
}

/// Aggregated context for position `i` (0-based) given the prefix rows
/// `0..i`: the initial hidden state for an empty prefix, otherwise the
/// hidden output after consuming the prefix in order.
pub fn aggregate_context(prefix: &[&[f64]], cell: &LstmCell) -> Vec<f64> {
    let mut state = cell.initial_state();
    for row in prefix {
        state = cell.step(row, &state);
    }
    state.h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prefix_is_initial_state() {
        let mut rng = rng::seeded(3);
        let cell = LstmCell::random_dense(3, 4, 0.5, &mut rng);
        assert_eq!(aggregate_context(&[], &cell), cell.h0);
    }

    #[test]
    fn zero_weights_depend_only_on_biases() {
        // 2-unit cell, all weights and the initial state zero, biases set.
        let mut cell = LstmCell::zeros(2, 2);
        cell.bias = vec![0.3, -0.2, 0.5, 1.0, 0.1, 0.4, -0.7, 0.2];
        let rows_a: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 4.0]];
        let rows_b: Vec<Vec<f64>> = vec![vec![9.0, -1.0], vec![0.2, 0.2], vec![5.0, 5.0]];
        let ra: Vec<&[f64]> = rows_a.iter().map(Vec::as_slice).collect();
        let rb: Vec<&[f64]> = rows_b.iter().map(Vec::as_slice).collect();
        for n in 1..=3 {
            assert_eq!(aggregate_context(&ra[..n], &cell), aggregate_context(&rb[..n], &cell));
        }
        // Hand evaluation of the cell equations with gates fixed by the biases.
        let (i, f, g, o) = (
            [sigmoid(0.3), sigmoid(-0.2)],
            [sigmoid(0.5), sigmoid(1.0)],
            [0.1f64.tanh(), 0.4f64.tanh()],
            [sigmoid(-0.7), sigmoid(0.2)],
        );
        let mut c = [0.0f64; 2];
        for n in 1..=3 {
            for u in 0..2 {
                c[u] = f[u] * c[u] + i[u] * g[u];
            }
            let h: Vec<f64> = (0..2).map(|u| o[u] * c[u].tanh()).collect();
            let got = aggregate_context(&ra[..n], &cell);
            for u in 0..2 {
                assert!((got[u] - h[u]).abs() < 1e-15, "step {n} unit {u}");
            }
        }
        // The cell state carries over, so contexts keep changing with the
        // prefix length unless the forget gate is closed.
        assert_ne!(aggregate_context(&ra[..1], &cell), aggregate_context(&ra[..2], &cell));
    }

    #[test]
    fn incremental_equals_batch() {
        let mut rng = rng::seeded(9);
        let cell = LstmCell::random_dense(3, 5, 0.4, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|k| vec![k as f64 * 0.1, -0.2, 0.7]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mut s = cell.initial_state();
        s = cell.step(refs[0], &s);
        s = cell.step(refs[1], &s);
        assert_eq!(s.h, aggregate_context(&refs[..2], &cell));
        let ctx = cell.contexts(&refs, 4);
        for (i, c) in ctx.iter().enumerate() {
            assert_eq!(c, &aggregate_context(&refs[..i], &cell));
        }
    }

    #[test]
    fn step_backward_matches_finite_differences() {
        let mut rng = rng::seeded(1);
        let cell = LstmCell::random_dense(3, 2, 0.7, &mut rng);
        let x = vec![0.3, -0.4, 0.9];
        let st = LstmState {
            h: vec![0.1, -0.5],
            c: vec![0.7, 0.2],
        };
        // Scalar objective: weighted sum of h' and c'.
        let wh = [0.6, -1.1];
        let wc = [0.25, 0.8];
        let f = |cell: &LstmCell, x: &[f64]| {
            let s = cell.step(x, &st);
            s.h.iter().zip(wh).map(|(a, b)| a * b).sum::<f64>()
                + s.c.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = cell.step_cached(&x, &st);
        let mut grad = LstmCell::zeros(3, 2);
        let (dx, _, _) = cell.step_backward(&cache, &wh, &wc, &mut grad);
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (f(&cell, &xp) - f(&cell, &xm)) / (2.0 * h);
            assert!((fd - dx[k]).abs() < 1e-8);
        }
        for r in 0..cell.w_ih.len() {
            let mut cp = cell.clone();
            cp.w_ih[r] += h;
            let mut cm = cell.clone();
            cm.w_ih[r] -= h;
            let fd = (f(&cp, &x) - f(&cm, &x)) / (2.0 * h);
            assert!((fd - grad.w_ih[r]).abs() < 1e-8);
        }
    }
}
