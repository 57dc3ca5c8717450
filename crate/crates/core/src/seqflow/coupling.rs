//! Affine coupling layer conditioned on the aggregated context.
//!
//! Features are split by an alternating mask into a pass-through part `a`
//! and a transformed part `b`. A two-layer tanh perceptron reads `[a, c]`
//! and emits a raw log-scale and a shift for every feature of `b`; the
//! log-scale is bounded as `s = s_max · tanh(raw / s_max)`.
//!
//! normalize: `b' = (b − t) ⊙ exp(−s)`, log-det `−Σ s`.
//! generate:  `b  = b' ⊙ exp(s) + t`.

use rand::Rng;

use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Conditioner {
    pub(crate) n_in: usize,
    pub(crate) n_hidden: usize,
    pub(crate) n_out: usize,
    /// `hidden × in`, row-major.
    pub(crate) w1: Vec<f64>,
    pub(crate) b1: Vec<f64>,
    /// `out × hidden`, row-major. Rows `0..nb` give the raw log-scale,
    /// rows `nb..2nb` the shift.
    pub(crate) w2: Vec<f64>,
    pub(crate) b2: Vec<f64>,
}

pub(crate) struct ConditionerCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Conditioner {
    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_hidden,
            n_out,
            w1: vec![0.0; n_hidden * n_in],
            b1: vec![0.0; n_hidden],
            w2: vec![0.0; n_out * n_hidden],
            b2: vec![0.0; n_out],
        }
    }

    fn forward(&self, input: &[f64]) -> (Vec<f64>, ConditionerCache) {
        let mut hidden = self.b1.clone();
        for (r, hv) in hidden.iter_mut().enumerate() {
            let w = &self.w1[r * self.n_in..(r + 1) * self.n_in];
            *hv = (*hv + w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()).tanh();
        }
        let mut out = self.b2.clone();
        for (r, ov) in out.iter_mut().enumerate() {
            let w = &self.w2[r * self.n_hidden..(r + 1) * self.n_hidden];
            *ov += w.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
        }
        (
            out,
            ConditionerCache {
                input: input.to_vec(),
                hidden,
            },
        )
    }

    fn backward(&self, cache: &ConditionerCache, dout: &[f64], grad: &mut Conditioner) -> Vec<f64> {
        let mut dhidden = vec![0.0; self.n_hidden];
        for (r, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.b2[r] += d;
            let w = &self.w2[r * self.n_hidden..(r + 1) * self.n_hidden];
            let gw = &mut grad.w2[r * self.n_hidden..(r + 1) * self.n_hidden];
            for k in 0..self.n_hidden {
                gw[k] += d * cache.hidden[k];
                dhidden[k] += d * w[k];
            }
        }
        let mut dinput = vec![0.0; self.n_in];
        for (r, &dh) in dhidden.iter().enumerate() {
            let hv = cache.hidden[r];
            let dp = dh * (1.0 - hv * hv);
            if dp == 0.0 {
                continue;
            }
            grad.b1[r] += dp;
            let w = &self.w1[r * self.n_in..(r + 1) * self.n_in];
            let gw = &mut grad.w1[r * self.n_in..(r + 1) * self.n_in];
            for k in 0..self.n_in {
                gw[k] += dp * cache.input[k];
                dinput[k] += dp * w[k];
            }
        }
        dinput
    }

    pub(crate) fn params(&self) -> [(&'static str, &[f64]); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    /// Pass-through feature indices (`a`).
    pub(crate) keep: Vec<usize>,
    /// Transformed feature indices (`b`).
    pub(crate) transform: Vec<usize>,
    pub(crate) s_max: f64,
    pub(crate) net: Conditioner,
}

/// Output of the conditioner for one position.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleShift {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

pub(crate) struct CouplingCache {
    net: ConditionerCache,
    raw_s: Vec<f64>,
    s: Vec<f64>,
    b_out: Vec<f64>,
}

impl CouplingLayer {
    /// Layer `index` keeps features whose parity matches the layer parity, so
    /// consecutive layers alternate.
    pub fn zeros(index: usize, features: usize, context: usize, hidden: usize, s_max: f64) -> Self {
        let (keep, transform): (Vec<usize>, Vec<usize>) =
            (0..features).partition(|j| (j + index).is_multiple_of(2));
        let net = Conditioner::zeros(keep.len() + context, hidden, 2 * transform.len());
        Self {
            keep,
            transform,
            s_max,
            net,
        }
    }

    /// First layer random, output layer scaled by `out_scale` (zero gives an
    /// identity layer).
    pub fn random<R: Rng + ?Sized>(
        index: usize,
        features: usize,
        context: usize,
        hidden: usize,
        s_max: f64,
        out_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(index, features, context, hidden, s_max);
        let n_in = layer.net.n_in as f64;
        let b1 = 1.0 / n_in.sqrt();
        for w in &mut layer.net.w1 {
            *w = rng.random_range(-b1..b1);
        }
        let b2 = out_scale / (hidden as f64).sqrt();
        if b2 > 0.0 {
            for w in &mut layer.net.w2 {
                *w = rng.random_range(-b2..b2);
            }
        }
        layer
    }

    pub fn random_dense<R: Rng + ?Sized>(
        index: usize,
        features: usize,
        context: usize,
        hidden: usize,
        s_max: f64,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(index, features, context, hidden, s_max);
        for (_, p) in layer.net.params_mut() {
            for v in p {
                *v = scale * rng::standard_normal(rng);
            }
        }
        layer
    }

    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn transform(&self) -> &[usize] {
        &self.transform
    }

    fn net_input(&self, y: &[f64], context: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.net.n_in);
        input.extend(self.keep.iter().map(|&j| y[j]));
        input.extend_from_slice(context);
        input
    }

    fn bound(&self, raw: f64) -> f64 {
        self.s_max * (raw / self.s_max).tanh()
    }

    /// Bounded log-scale and shift for the pass-through features of `y`.
    pub fn scale_shift(&self, y: &[f64], context: &[f64]) -> ScaleShift {
        let (out, _) = self.net.forward(&self.net_input(y, context));
        let nb = self.transform.len();
        ScaleShift {
            s: out[..nb].iter().map(|&r| self.bound(r)).collect(),
            t: out[nb..].to_vec(),
        }
    }

    /// Data side to base side. Returns the log-det contribution `−Σ s`.
    pub fn normalize(&self, y: &[f64], context: &[f64], out: &mut [f64]) -> f64 {
        let st = self.scale_shift(y, context);
        apply_normalize(&self.keep, &self.transform, y, &st, out)
    }

    /// Base side to data side; exact inverse of [`normalize`](Self::normalize).
    pub fn generate(&self, y_base: &[f64], context: &[f64], out: &mut [f64]) {
        // `a` is unchanged by the layer, so the conditioner sees the same input.
        let st = self.scale_shift(y_base, context);
        apply_generate(&self.keep, &self.transform, y_base, &st, out)
    }

    pub(crate) fn normalize_cached(&self, y: &[f64], context: &[f64], out: &mut [f64]) -> (f64, CouplingCache) {
        let (raw, net) = self.net.forward(&self.net_input(y, context));
        let nb = self.transform.len();
        let raw_s = raw[..nb].to_vec();
        let s: Vec<f64> = raw_s.iter().map(|&r| self.bound(r)).collect();
        let st = ScaleShift {
            s,
            t: raw[nb..].to_vec(),
        };
        let logdet = apply_normalize(&self.keep, &self.transform, y, &st, out);
        let b_out = self.transform.iter().map(|&j| out[j]).collect();
        (
            logdet,
            CouplingCache {
                net,
                raw_s,
                s: st.s,
                b_out,
            },
        )
    }

    /// Backward of [`normalize`] for one position. `dout` is the gradient
    /// w.r.t. the layer output and `dlogdet` w.r.t. its log-det. Writes the
    /// gradient w.r.t. the layer input into `dy` and accumulates the context
    /// gradient into `dcontext`.
    pub(crate) fn normalize_backward(
        &self,
        cache: &CouplingCache,
        dout: &[f64],
        dlogdet: f64,
        dy: &mut [f64],
        dcontext: &mut [f64],
        grad: &mut CouplingLayer,
    ) {
        let nb = self.transform.len();
        let mut dnet = vec![0.0; 2 * nb];
        for (k, &j) in self.transform.iter().enumerate() {
            let es = (-cache.s[k]).exp();
            let g = dout[j];
            dy[j] = g * es;
            // t enters as −t·exp(−s); s enters through b' and the log-det.
            dnet[nb + k] = -g * es;
            let ds = -g * cache.b_out[k] - dlogdet;
            let th = (cache.raw_s[k] / self.s_max).tanh();
            dnet[k] = ds * (1.0 - th * th);
        }
        let dinput = self.net.backward(&cache.net, &dnet, &mut grad.net);
        for (k, &j) in self.keep.iter().enumerate() {
            dy[j] = dout[j] + dinput[k];
        }
        let na = self.keep.len();
        for (dc, di) in dcontext.iter_mut().zip(&dinput[na..]) {
            *dc += di;
        }
    }
}

/// `a' = a`, `b' = (b − t) ⊙ exp(−s)`; returns `−Σ s`.
pub fn apply_normalize(keep: &[usize], transform: &[usize], y: &[f64], st: &ScaleShift, out: &mut [f64]) -> f64 {
    for &j in keep {
        out[j] = y[j];
    }
    let mut logdet = 0.0;
    for (k, &j) in transform.iter().enumerate() {
        out[j] = (y[j] - st.t[k]) * (-st.s[k]).exp();
        logdet -= st.s[k];
    }
    logdet
}

/// `a = a'`, `b = b' ⊙ exp(s) + t`.
pub fn apply_generate(keep: &[usize], transform: &[usize], y: &[f64], st: &ScaleShift, out: &mut [f64]) {
    for &j in keep {
        out[j] = y[j];
    }
    for (k, &j) in transform.iter().enumerate() {
        out[j] = y[j] * st.s[k].exp() + st.t[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// F = 2, context of width 1, conditioner outputs constant (s, t).
    fn constant_layer(s: f64, t: f64) -> CouplingLayer {
        let mut layer = CouplingLayer::zeros(0, 2, 1, 3, 5.0);
        // raw is chosen so that the bounded log-scale equals `s`.
        layer.net.b2 = vec![5.0 * (s / 5.0).atanh(), t];
        layer
    }

    #[test]
    fn masks_alternate() {
        let l0 = CouplingLayer::zeros(0, 5, 2, 4, 5.0);
        let l1 = CouplingLayer::zeros(1, 5, 2, 4, 5.0);
        assert_eq!(l0.keep(), &[0, 2, 4]);
        assert_eq!(l0.transform(), &[1, 3]);
        assert_eq!(l1.keep(), l0.transform());
    }

    #[test]
    fn zero_params_are_identity() {
        let layer = CouplingLayer::zeros(0, 4, 3, 8, 5.0);
        let y = [0.3, -1.2, 2.0, 0.7];
        let mut out = [0.0; 4];
        let ld = layer.normalize(&y, &[1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, y);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn hand_computed_affine_case() {
        let layer = constant_layer(0.5, 1.0);
        let mut out = [0.0; 2];
        let ld = layer.normalize(&[1.0, 2.0], &[0.0], &mut out);
        // (2 − 1)·e^{−0.5}
        let expected = 0.606_530_659_712_633_4;
        assert_eq!(out[0], 1.0);
        assert!((out[1] - expected).abs() < 1e-12);
        assert!((ld + 0.5).abs() < 1e-12);

        let mut back = [0.0; 2];
        layer.generate(&[1.0, 0.606531], &[0.0], &mut back);
        assert!((back[1] - 2.0).abs() < 2e-6);
        layer.generate(&out, &[0.0], &mut back);
        assert!((back[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scale_is_bounded() {
        let layer = constant_layer(4.999_999, 0.0);
        let mut big = layer.clone();
        big.net.b2[0] = 1e6;
        let st = big.scale_shift(&[0.0, 0.0], &[0.0]);
        assert!(st.s[0] <= 5.0 && st.s[0] > 4.99);
    }

    #[test]
    fn generate_inverts_normalize_for_random_params() {
        let mut rng = rng::seeded(21);
        for idx in 0..4 {
            let layer = CouplingLayer::random_dense(idx, 5, 3, 6, 5.0, 0.8, &mut rng);
            let y: Vec<f64> = (0..5).map(|_| rng::standard_normal(&mut rng)).collect();
            let c: Vec<f64> = (0..3).map(|_| rng::standard_normal(&mut rng)).collect();
            let mut z = vec![0.0; 5];
            layer.normalize(&y, &c, &mut z);
            let mut back = vec![0.0; 5];
            layer.generate(&z, &c, &mut back);
            for (a, b) in y.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
