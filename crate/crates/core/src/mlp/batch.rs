//! Batched jet propagation through the dense network.
//!
//! Activations are stored as `neurons x (channels * points)` matrices with
//! one column block per jet channel: the value, then one block per seed
//! direction, then one block per requested second-derivative pair. Each
//! dense layer is then a single matrix product over all channels, the bias
//! entering the value block only. The reverse pass mirrors the jet-adjoint
//! rules of the scalar graph, restricted to the requested channels.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::jet::{hess_index, Jet2};

use super::ParamLayout;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSet {
    /// Jet dimension of the produced output jets.
    pub dim: usize,
    /// Whether first derivatives along each input are propagated.
    pub derivs: bool,
    /// Second-derivative pairs propagated (requires `derivs`).
    pub pairs: Vec<(usize, usize)>,
}

impl ChannelSet {
    pub fn value_only(dim: usize) -> Self {
        Self {
            dim,
            derivs: false,
            pairs: Vec::new(),
        }
    }

    pub fn full(dim: usize) -> Self {
        Self::with_pairs(dim, crate::jet::hess_pairs(dim))
    }

    pub fn with_pairs(dim: usize, pairs: Vec<(usize, usize)>) -> Self {
        Self {
            dim,
            derivs: true,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        if self.derivs {
            1 + self.dim + self.pairs.len()
        } else {
            1
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub struct BatchTape {
    channels: ChannelSet,
    n: usize,
    /// Input matrix of every layer.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

fn weights<'a>(params: &'a [f64], layout: &ParamLayout, l: usize) -> ArrayView2<'a, f64> {
    let slot = layout.layers[l];
    ArrayView2::from_shape((slot.fan_out, slot.fan_in), &params[slot.weights..slot.bias]).expect("layout shape")
}

/// Runs the network on `points` (each the first `in_dim` entries of a
/// `(t, x, y)` triple) propagating the requested channels.
pub fn forward_batch(layout: &ParamLayout, params: &[f64], points: &[[f64; 3]], channels: &ChannelSet) -> BatchTape {
    let n = points.len();
    let nc = channels.len();
    let in_dim = layout.config.in_dim;
    assert!(!channels.derivs || channels.dim == in_dim, "derivative channels need dim == in_dim");
    let mut a0 = Array2::<f64>::zeros((in_dim, nc * n));
    for (p, pt) in points.iter().enumerate() {
        for i in 0..in_dim {
            a0[[i, p]] = pt[i];
        }
    }
    if channels.derivs {
        for i in 0..in_dim {
            a0.slice_mut(s![i, (1 + i) * n..(2 + i) * n]).fill(1.0);
        }
    }

    let last = layout.layers.len() - 1;
    let mut acts = Vec::with_capacity(layout.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut a = a0;
    for (l, slot) in layout.layers.iter().enumerate() {
        let w = weights(params, layout, l);
        let mut z = w.dot(&a);
        let b = &params[slot.bias..slot.bias + slot.fan_out];
        for (o, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            for v in row.slice_mut(s![..n]) {
                *v += b[o];
            }
        }
        acts.push(a);
        if l < last {
            let next = tanh_forward(&z, n, channels);
            pre.push(z);
            a = next;
        } else {
            return BatchTape {
                channels: channels.clone(),
                n,
                acts,
                pre,
                output: z,
            };
        }
    }
    unreachable!("network has an output layer")
}

#[inline]
fn tanh_derivs(z: f64) -> [f64; 4] {
    let s = z.tanh();
    let s1 = 1.0 - s * s;
    let s2 = -2.0 * s * s1;
    let s3 = -2.0 * (s1 * s1 + s * s2);
    [s, s1, s2, s3]
}

fn tanh_forward(z: &Array2<f64>, n: usize, ch: &ChannelSet) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(z.raw_dim());
    let d = if ch.derivs { ch.dim } else { 0 };
    let pair_base = 1 + d;
    for (zr, mut or) in z.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let zr = zr.as_slice().expect("row-major");
        let or = or.as_slice_mut().expect("row-major");
        for p in 0..n {
            let [s, s1, s2, _] = tanh_derivs(zr[p]);
            or[p] = s;
            for i in 0..d {
                or[(1 + i) * n + p] = s1 * zr[(1 + i) * n + p];
            }
            for (k, &(i, j)) in ch.pairs.iter().enumerate() {
                let col = (pair_base + k) * n + p;
                or[col] = s1 * zr[col] + s2 * zr[(1 + i) * n + p] * zr[(1 + j) * n + p];
            }
        }
    }
    out
}

fn tanh_backward(z: &Array2<f64>, abar: &Array2<f64>, n: usize, ch: &ChannelSet) -> Array2<f64> {
    let mut zbar = Array2::<f64>::zeros(z.raw_dim());
    let d = if ch.derivs { ch.dim } else { 0 };
    let pair_base = 1 + d;
    for ((zr, ar), mut br) in z
        .axis_iter(Axis(0))
        .zip(abar.axis_iter(Axis(0)))
        .zip(zbar.axis_iter_mut(Axis(0)))
    {
        let zr = zr.as_slice().expect("row-major");
        let ar = ar.as_slice().expect("row-major");
        let br = br.as_slice_mut().expect("row-major");
        for p in 0..n {
            let [_, s1, s2, s3] = tanh_derivs(zr[p]);
            let mut v = s1 * ar[p];
            for i in 0..d {
                let c = (1 + i) * n + p;
                v += s2 * ar[c] * zr[c];
                br[c] = s1 * ar[c];
            }
            for (k, &(i, j)) in ch.pairs.iter().enumerate() {
                let col = (pair_base + k) * n + p;
                let yb = ar[col];
                if yb == 0.0 {
                    continue;
                }
                let gi = zr[(1 + i) * n + p];
                let gj = zr[(1 + j) * n + p];
                v += yb * (s2 * zr[col] + s3 * gi * gj);
                br[(1 + i) * n + p] += yb * s2 * gj;
                br[(1 + j) * n + p] += yb * s2 * gi;
                br[col] = s1 * yb;
            }
            br[p] = v;
        }
    }
    zbar
}

impl BatchTape {
    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> &ChannelSet {
        &self.channels
    }

    pub fn out_dim(&self) -> usize {
        self.output.nrows()
    }

    /// Output jet of channel `o` at point `p`. Unpropagated slots are zero.
    pub fn output_jet(&self, p: usize, o: usize) -> Jet2 {
        let ch = &self.channels;
        let n = self.n;
        let row = self.output.row(o);
        let mut j = Jet2::zero(ch.dim);
        j.value = row[p];
        if ch.derivs {
            for i in 0..ch.dim {
                j.grad[i] = row[(1 + i) * n + p];
            }
            for (k, &(a, b)) in ch.pairs.iter().enumerate() {
                j.hess[hess_index(ch.dim, a, b)] = row[(1 + ch.dim + k) * n + p];
            }
        }
        j
    }

    /// Accumulates into `grad` (length `layout.num_net`) the parameter
    /// gradient for output adjoints `adj[p * out_dim + o]`.
    pub fn backward(&self, layout: &ParamLayout, params: &[f64], adj: &[Jet2], grad: &mut [f64]) {
        let ch = &self.channels;
        let n = self.n;
        let out_dim = self.out_dim();
        assert_eq!(adj.len(), n * out_dim);
        let mut dz = Array2::<f64>::zeros(self.output.raw_dim());
        for p in 0..n {
            for o in 0..out_dim {
                let a = &adj[p * out_dim + o];
                dz[[o, p]] = a.value;
                if ch.derivs {
                    for i in 0..ch.dim {
                        dz[[o, (1 + i) * n + p]] = a.grad[i];
                    }
                    for (k, &(x, y)) in ch.pairs.iter().enumerate() {
                        dz[[o, (1 + ch.dim + k) * n + p]] = a.hess[hess_index(ch.dim, x, y)];
                    }
                }
            }
        }
        for l in (0..layout.layers.len()).rev() {
            let slot = layout.layers[l];
            let a_in = &self.acts[l];
            let dw = dz.dot(&a_in.t());
            for (g, v) in grad[slot.weights..slot.bias].iter_mut().zip(dw.iter()) {
                *g += v;
            }
            for o in 0..slot.fan_out {
                grad[slot.bias + o] += dz.slice(s![o, ..n]).sum();
            }
            if l == 0 {
                break;
            }
            let w = weights(params, layout, l);
            let da = w.t().dot(&dz);
            dz = tanh_backward(&self.pre[l - 1], &da, n, ch);
        }
    }
}
