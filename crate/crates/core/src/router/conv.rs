use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Two 3×3 zero-padded convolutions with a ReLU in between.
///
/// Parameter layout: `w1 (hidden, in, 3, 3) | b1 | w2 (out, hidden, 3, 3) | b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    inputs: usize,
    hidden: usize,
    outputs: usize,
    params: Vec<f64>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    input: ImageBuffer,
    /// Post-ReLU hidden activations.
    hidden: ImageBuffer,
}

impl ConvTrace {
    pub fn input(&self) -> &ImageBuffer {
        &self.input
    }
}

/// Accumulates `conv3x3(x, w, b)` into `out` (`x`: `H x W x cin`, `out`: `H x W x cout`).
fn conv3x3(x: &ImageBuffer, w: &[f64], b: &[f64], cout: usize, out: &mut ImageBuffer) {
    let (h, wd, cin) = x.shape();
    let xd = x.data();
    let od = out.data_mut();
    for y in 0..h {
        for xx in 0..wd {
            let o = &mut od[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            o.copy_from_slice(b);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let src = &xd[(sy as usize * wd + sx as usize) * cin..][..cin];
                    for (co, ov) in o.iter_mut().enumerate() {
                        let wk = &w[co * cin * 9..];
                        let mut acc = 0.0;
                        for (ci, &xv) in src.iter().enumerate() {
                            acc += wk[ci * 9 + ky * 3 + kx] * xv;
                        }
                        *ov += acc;
                    }
                }
            }
        }
    }
}

/// Backward of [`conv3x3`]: accumulates weight/bias gradients and, when
/// requested, the input gradient.
fn conv3x3_backward(
    x: &ImageBuffer,
    w: &[f64],
    d_out: &ImageBuffer,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut ImageBuffer>,
) {
    let (h, wd, cin) = x.shape();
    let cout = d_out.channels();
    let xd = x.data();
    let gd = d_out.data();
    for y in 0..h {
        for xx in 0..wd {
            let g = &gd[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for (co, &gv) in g.iter().enumerate() {
                db[co] += gv;
            }
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let base = (sy as usize * wd + sx as usize) * cin;
                    for (co, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            let k = co * cin * 9 + ci * 9 + ky * 3 + kx;
                            dw[k] += gv * xd[base + ci];
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxd = dx.data_mut();
                        for ci in 0..cin {
                            let mut acc = 0.0;
                            for (co, &gv) in g.iter().enumerate() {
                                acc += gv * w[co * cin * 9 + ci * 9 + ky * 3 + kx];
                            }
                            dxd[base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
}

impl ConvNet {
    /// He-normal first layer, zero output layer (the network starts as the
    /// zero function).
    pub fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(inputs, hidden, outputs);
        let std = (2.0 / (inputs * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in &mut net.params[..hidden * inputs * 9] {
            *v = normal.sample(rng);
        }
        net
    }

    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        let len = hidden * inputs * 9 + hidden + outputs * hidden * 9 + outputs;
        Self {
            inputs,
            hidden,
            outputs,
            params: vec![0.0; len],
        }
    }

    pub fn from_params(inputs: usize, hidden: usize, outputs: usize, params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(inputs, hidden, outputs);
        if params.len() != net.params.len() {
            return Err(Error::Format(format!(
                "conv net expects {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        Ok(Self { params, ..net })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let n1 = self.hidden * self.inputs * 9;
        let (w1, rest) = self.params.split_at(n1);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.outputs * self.hidden * 9);
        (w1, b1, w2, b2)
    }

    fn check_input(&self, input: &ImageBuffer) -> Result<()> {
        if input.channels() != self.inputs {
            return Err(Error::input(format!(
                "conv net expects {} input channels, got {}",
                self.inputs,
                input.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &ImageBuffer) -> Result<(ImageBuffer, ConvTrace)> {
        self.check_input(input)?;
        let (h, w, _) = input.shape();
        let (w1, b1, w2, b2) = self.split();
        let mut hidden = ImageBuffer::zeros(h, w, self.hidden);
        conv3x3(input, w1, b1, self.hidden, &mut hidden);
        for v in hidden.data_mut() {
            *v = v.max(0.0);
        }
        let mut out = ImageBuffer::zeros(h, w, self.outputs);
        conv3x3(&hidden, w2, b2, self.outputs, &mut out);
        Ok((
            out,
            ConvTrace {
                input: input.clone(),
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients into `d_params`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        trace: &ConvTrace,
        d_out: &ImageBuffer,
        d_params: &mut [f64],
        want_input: bool,
    ) -> Result<Option<ImageBuffer>> {
        let (h, w, _) = trace.input.shape();
        if d_out.shape() != (h, w, self.outputs) || d_params.len() != self.params.len() {
            return Err(Error::input("conv backward shape mismatch"));
        }
        let (w1, _, w2, _) = self.split();
        let n1 = self.hidden * self.inputs * 9;
        let (dw1, rest) = d_params.split_at_mut(n1);
        let (db1, rest) = rest.split_at_mut(self.hidden);
        let (dw2, db2) = rest.split_at_mut(self.outputs * self.hidden * 9);
        let mut d_hidden = ImageBuffer::zeros(h, w, self.hidden);
        conv3x3_backward(&trace.hidden, w2, d_out, dw2, db2, Some(&mut d_hidden));
        for (g, &a) in d_hidden.data_mut().iter_mut().zip(trace.hidden.data()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        let mut d_input = want_input.then(|| ImageBuffer::zeros(h, w, self.inputs));
        conv3x3_backward(&trace.input, w1, &d_hidden, dw1, db1, d_input.as_mut());
        Ok(d_input)
    }

    /// Directional derivative of the output w.r.t. the input along
    /// `d_input`, at the point recorded in `trace`.
    pub fn jvp(&self, trace: &ConvTrace, d_input: &ImageBuffer) -> Result<ImageBuffer> {
        self.check_input(d_input)?;
        let (h, w, _) = trace.input.shape();
        let (w1, _, w2, _) = self.split();
        let mut dh = ImageBuffer::zeros(h, w, self.hidden);
        conv3x3(d_input, w1, &vec![0.0; self.hidden], self.hidden, &mut dh);
        for (g, &a) in dh.data_mut().iter_mut().zip(trace.hidden.data()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        let mut out = ImageBuffer::zeros(h, w, self.outputs);
        conv3x3(&dh, w2, &vec![0.0; self.outputs], self.outputs, &mut out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn randomized(seed: u64) -> (ConvNet, ImageBuffer, ImageBuffer) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut net = ConvNet::new(3, 4, 2, &mut rng);
        for v in net.params_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let x = ImageBuffer::from_fn(6, 5, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let up = ImageBuffer::from_fn(6, 5, 2, |_, _, _| rng.random_range(-1.0..1.0));
        (net, x, up)
    }

    fn loss(net: &ConvNet, x: &ImageBuffer, up: &ImageBuffer) -> f64 {
        let (o, _) = net.forward(x).unwrap();
        o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = ConvNet::new(5, 8, 1, &mut rng);
        let x = ImageBuffer::filled(4, 4, 5, 0.7);
        assert!(net.forward(&x).unwrap().0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn receptive_field_is_five_by_five() {
        let (net, x, _) = randomized(2);
        let mut y = x.clone();
        y.set(0, 0, 1, 5.0);
        let (a, _) = net.forward(&x).unwrap();
        let (b, _) = net.forward(&y).unwrap();
        for r in 0..6 {
            for c in 0..5 {
                let changed = (0..2).any(|k| a.get(r, c, k) != b.get(r, c, k));
                if r > 2 || c > 2 {
                    assert!(!changed, "pixel ({r},{c}) outside the receptive field changed");
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (net, x, up) = randomized(1);
        let (_, trace) = net.forward(&x).unwrap();
        let mut dp = vec![0.0; net.params().len()];
        let dx = net.backward(&trace, &up, &mut dp, true).unwrap().unwrap();
        let h = 1e-6;
        for k in 0..net.params().len() {
            let mut a = net.clone();
            a.params_mut()[k] += h;
            let mut b = net.clone();
            b.params_mut()[k] -= h;
            let num = (loss(&a, &x, &up) - loss(&b, &x, &up)) / (2.0 * h);
            assert!((num - dp[k]).abs() <= 1e-6 * num.abs().max(1e-2), "param {k}: {} vs {num}", dp[k]);
        }
        for k in 0..x.data().len() {
            let mut a = x.clone();
            a.data_mut()[k] += h;
            let mut b = x.clone();
            b.data_mut()[k] -= h;
            let num = (loss(&net, &a, &up) - loss(&net, &b, &up)) / (2.0 * h);
            assert!((num - dx.data()[k]).abs() <= 1e-6 * num.abs().max(1e-2));
        }
    }

    #[test]
    fn jvp_matches_directional_difference() {
        let (net, x, _) = randomized(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let d = ImageBuffer::from_fn(6, 5, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let (_, trace) = net.forward(&x).unwrap();
        let j = net.jvp(&trace, &d).unwrap();
        let h = 1e-7;
        let (a, _) = net.forward(&x.axpby(1.0, &d, h)).unwrap();
        let (b, _) = net.forward(&x.axpby(1.0, &d, -h)).unwrap();
        let num = a.axpby(1.0 / (2.0 * h), &b, -1.0 / (2.0 * h));
        assert!(j.max_abs_diff(&num) <= 1e-6);
    }
}
