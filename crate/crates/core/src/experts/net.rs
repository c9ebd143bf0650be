use rand::Rng;

/// Small tanh MLP mapping `(latent, t)` to a 3D mean offset.
///
/// Parameter layout (flat): `w1 | b1 | w2 | b2 | w3 | b3`, matrices row-major
/// with shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformNet {
    latent_dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Activations of one forward evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DeformTrace {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl DeformNet {
    pub const OUTPUT: usize = 3;

    /// Xavier-uniform hidden layers; the output layer starts at zero so the
    /// network initially predicts no offset.
    pub fn new(latent_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut net = Self {
            latent_dim,
            hidden,
            params: Vec::new(),
        };
        let lay = net.layout();
        net.params = vec![0.0; lay.len];
        let inp = latent_dim + 1;
        let a1 = (6.0 / (inp + hidden) as f64).sqrt();
        for v in &mut net.params[lay.w1..lay.b1] {
            *v = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (2 * hidden) as f64).sqrt();
        for v in &mut net.params[lay.w2..lay.b2] {
            *v = rng.random_range(-a2..a2);
        }
        net
    }

    pub fn from_params(latent_dim: usize, hidden: usize, params: Vec<f64>) -> crate::Result<Self> {
        let net = Self {
            latent_dim,
            hidden,
            params: Vec::new(),
        };
        if params.len() != net.layout().len {
            return Err(crate::Error::Format(format!(
                "deform net expects {} parameters, got {}",
                net.layout().len,
                params.len()
            )));
        }
        Ok(Self { params, ..net })
    }

    /// Length of the flat parameter vector for the given dimensions.
    pub fn parameter_count(latent_dim: usize, hidden: usize) -> usize {
        Self {
            latent_dim,
            hidden,
            params: Vec::new(),
        }
        .layout()
        .len
    }

    fn layout(&self) -> Layout {
        let (i, h, o) = (self.latent_dim + 1, self.hidden, Self::OUTPUT);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + o,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, latent: &[f64], t: f64) -> ([f64; 3], DeformTrace) {
        debug_assert_eq!(latent.len(), self.latent_dim);
        let lay = self.layout();
        let (h, i) = (self.hidden, self.latent_dim + 1);
        let mut input = latent.to_vec();
        input.push(t);
        let p = &self.params;
        let dense = |w: usize, b: usize, x: &[f64], rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|r| p[b + r] + (0..x.len()).map(|c| p[w + r * x.len() + c] * x[c]).sum::<f64>())
                .collect()
        };
        let h1: Vec<f64> = dense(lay.w1, lay.b1, &input, h).into_iter().map(f64::tanh).collect();
        debug_assert_eq!(input.len(), i);
        let h2: Vec<f64> = dense(lay.w2, lay.b2, &h1, h).into_iter().map(f64::tanh).collect();
        let o = dense(lay.w3, lay.b3, &h2, Self::OUTPUT);
        ([o[0], o[1], o[2]], DeformTrace { input, h1, h2 })
    }

    /// Accumulates parameter gradients into `d_params` and returns the
    /// gradient w.r.t. the latent code.
    pub fn backward(&self, trace: &DeformTrace, d_out: &[f64; 3], d_params: &mut [f64]) -> Vec<f64> {
        let lay = self.layout();
        let (h, i) = (self.hidden, self.latent_dim + 1);
        let p = &self.params;
        let mut dh2 = vec![0.0; h];
        for (r, &g) in d_out.iter().enumerate() {
            d_params[lay.b3 + r] += g;
            for c in 0..h {
                d_params[lay.w3 + r * h + c] += g * trace.h2[c];
                dh2[c] += p[lay.w3 + r * h + c] * g;
            }
        }
        let dz2: Vec<f64> = dh2.iter().zip(&trace.h2).map(|(g, a)| g * (1.0 - a * a)).collect();
        let mut dh1 = vec![0.0; h];
        for r in 0..h {
            d_params[lay.b2 + r] += dz2[r];
            for c in 0..h {
                d_params[lay.w2 + r * h + c] += dz2[r] * trace.h1[c];
                dh1[c] += p[lay.w2 + r * h + c] * dz2[r];
            }
        }
        let dz1: Vec<f64> = dh1.iter().zip(&trace.h1).map(|(g, a)| g * (1.0 - a * a)).collect();
        let mut dx = vec![0.0; i];
        for r in 0..h {
            d_params[lay.b1 + r] += dz1[r];
            for c in 0..i {
                d_params[lay.w1 + r * i + c] += dz1[r] * trace.input[c];
                dx[c] += p[lay.w1 + r * i + c] * dz1[r];
            }
        }
        dx.truncate(self.latent_dim);
        dx
    }

    /// Upper bound on `|∂out/∂t|` (per output norm) from the weights alone.
    pub fn time_lipschitz(&self) -> f64 {
        let lay = self.layout();
        let (h, i) = (self.hidden, self.latent_dim + 1);
        let p = &self.params;
        let col_t: f64 = (0..h).map(|r| p[lay.w1 + r * i + i - 1].powi(2)).sum::<f64>().sqrt();
        let fro = |w: usize, rows: usize, cols: usize| -> f64 {
            (0..rows * cols).map(|k| p[w + k].powi(2)).sum::<f64>().sqrt()
        };
        col_t * fro(lay.w2, h, h) * fro(lay.w3, Self::OUTPUT, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn randomized(seed: u64) -> DeformNet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut net = DeformNet::new(4, 6, &mut rng);
        for v in net.params_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        net
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let net = DeformNet::new(8, 16, &mut rng);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(net.forward(&[0.5; 8], t).0, [0.0; 3]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = randomized(3);
        let latent = [0.2, -0.4, 0.9, 0.1];
        let weights = [0.7, -1.1, 0.4];
        let f = |n: &DeformNet, l: &[f64]| -> f64 {
            let (o, _) = n.forward(l, 0.37);
            o.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = net.forward(&latent, 0.37);
        let mut dp = vec![0.0; net.params().len()];
        let dl = net.backward(&trace, &weights, &mut dp);
        let h = 1e-6;
        for k in 0..net.params().len() {
            let mut a = net.clone();
            a.params_mut()[k] += h;
            let mut b = net.clone();
            b.params_mut()[k] -= h;
            let num = (f(&a, &latent) - f(&b, &latent)) / (2.0 * h);
            assert!((num - dp[k]).abs() <= 1e-7 * num.abs().max(1e-3), "param {k}");
        }
        for k in 0..latent.len() {
            let mut a = latent;
            a[k] += h;
            let mut b = latent;
            b[k] -= h;
            let num = (f(&net, &a) - f(&net, &b)) / (2.0 * h);
            assert!((num - dl[k]).abs() <= 1e-7 * num.abs().max(1e-3));
        }
    }
}
