//! A small from-scratch convolutional regressor over ROI feature grids, with
//! explicit forward/backward passes in f64 and a pluggable residue loss.

mod gradcheck;
mod loss;
mod train;

pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use loss::{known_losses, make_loss, Mse, ResidueLoss, WrMse};
pub use train::{
    corrected_prob, train_stage2, EpochLog, RmsProp, Stage2TrainConfig, TrainSample, ValSample,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::roipatch::RoiPatchTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    /// valid convolution, stride 1, square kernel
    Conv { in_c: usize, out_c: usize, k: usize },
    Relu,
    Flatten,
    Fc { in_dim: usize, out_dim: usize },
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_c, out_c, k } => out_c * in_c * k * k + out_c,
            LayerSpec::Fc { in_dim, out_dim } => out_dim * in_dim + out_dim,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat { d } => d,
        }
    }
}

/// The residue-regression network: five 3 x 3 valid convolutions shrinking a
/// 13 x 13 grid to 3 x 3, then three fully connected layers down to one
/// linear output.
pub fn radhopnet_layers(in_channels: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { in_c: in_channels, out_c: 24, k: 3 },
        Relu,
        Conv { in_c: 24, out_c: 24, k: 3 },
        Relu,
        Conv { in_c: 24, out_c: 24, k: 3 },
        Relu,
        Conv { in_c: 24, out_c: 24, k: 3 },
        Relu,
        Conv { in_c: 24, out_c: 32, k: 3 },
        Relu,
        Flatten,
        Fc { in_dim: 288, out_dim: 64 },
        Relu,
        Fc { in_dim: 64, out_dim: 8 },
        Relu,
        Fc { in_dim: 8, out_dim: 1 },
    ]
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    /// shapes[0] is the input; shapes[i + 1] is the output of layer i
    pub shapes: Vec<Shape>,
    /// parameter offset of each layer in `params`
    pub offsets: Vec<usize>,
    pub params: Vec<f64>,
}

impl Network {
    /// Wire up a layer stack for the given input shape with Glorot-uniform
    /// seeded initialization (biases zero).
    pub fn new(layers: Vec<LayerSpec>, input: Shape, seed: u64) -> Network {
        let mut shapes = vec![input];
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0usize;
        for layer in &layers {
            offsets.push(total);
            total += layer.param_count();
            let prev = *shapes.last().unwrap();
            let next = match (*layer, prev) {
                (LayerSpec::Conv { in_c, out_c, k }, Shape::Map { c, h, w }) => {
                    assert_eq!(in_c, c, "conv input channels");
                    assert!(h >= k && w >= k, "conv input too small");
                    Shape::Map { c: out_c, h: h - k + 1, w: w - k + 1 }
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, s) => Shape::Flat { d: s.len() },
                (LayerSpec::Fc { in_dim, out_dim }, s) => {
                    assert_eq!(in_dim, s.len(), "fc input width");
                    Shape::Flat { d: out_dim }
                }
                (l, s) => panic!("layer {l:?} cannot follow shape {s:?}"),
            };
            shapes.push(next);
        }
        let mut params = vec![0.0f64; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, &off) in layers.iter().zip(&offsets) {
            let (n_weights, fan_in, fan_out) = match *layer {
                LayerSpec::Conv { in_c, out_c, k } => {
                    (out_c * in_c * k * k, in_c * k * k, out_c * k * k)
                }
                LayerSpec::Fc { in_dim, out_dim } => (out_dim * in_dim, in_dim, out_dim),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[off..off + n_weights] {
                *p = rng.gen_range(-limit..limit);
            }
            // biases (the tail of the layer's slice) stay zero
        }
        Network { layers, shapes, offsets, params }
    }

    /// The published stack over `in_channels`-deep 13 x 13 grids.
    pub fn radhopnet(in_channels: usize, seed: u64) -> Network {
        Network::new(
            radhopnet_layers(in_channels),
            Shape::Map { c: in_channels, h: 13, w: 13 },
            seed,
        )
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    /// Forward pass; fills `cache` with every intermediate activation and
    /// returns the scalar output.
    pub fn forward(&self, input: &[f64], cache: &mut Cache) -> f64 {
        assert_eq!(input.len(), self.input_len());
        cache.acts[0].copy_from_slice(input);
        for li in 0..self.layers.len() {
            self.forward_layer(li, cache);
        }
        cache.acts.last().unwrap()[0]
    }

    /// Backward pass from `d_out` (dL/d output), accumulating parameter
    /// gradients into `grads` (same layout as `params`). Requires the cache
    /// of the matching forward pass.
    pub fn backward(&self, cache: &mut Cache, d_out: f64, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let n = self.layers.len();
        cache.grad[n].iter_mut().for_each(|g| *g = 0.0);
        cache.grad[n][0] = d_out;
        for li in (0..n).rev() {
            let (gin_part, gout_part) = cache.grad.split_at_mut(li + 1);
            let g_out = gout_part[0].as_slice();
            let g_in = gin_part[li].as_mut_slice();
            let x = cache.acts[li].as_slice();
            let p = &self.params[self.offsets[li]..];
            let gp = &mut grads[self.offsets[li]..];
            match (self.layers[li], self.shapes[li]) {
                (LayerSpec::Conv { in_c, out_c, k }, Shape::Map { h, w, .. }) => {
                    // the input gradient of the first layer has no consumer
                    let gi = if li > 0 { Some(g_in) } else { None };
                    conv_backward(x, g_out, gi, p, gp, in_c, out_c, k, h, w);
                }
                (LayerSpec::Relu, _) => {
                    for ((gi, &go), &xi) in g_in.iter_mut().zip(g_out).zip(x) {
                        *gi = if xi > 0.0 { go } else { 0.0 };
                    }
                }
                (LayerSpec::Flatten, _) => g_in.copy_from_slice(g_out),
                (LayerSpec::Fc { in_dim, out_dim }, _) => {
                    let wts = &p[..out_dim * in_dim];
                    let (gw, gb) = gp[..out_dim * in_dim + out_dim].split_at_mut(out_dim * in_dim);
                    g_in.iter_mut().for_each(|g| *g = 0.0);
                    for o in 0..out_dim {
                        let go = g_out[o];
                        gb[o] += go;
                        let row = &wts[o * in_dim..(o + 1) * in_dim];
                        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            grow[i] += go * x[i];
                            g_in[i] += go * row[i];
                        }
                    }
                }
                (l, s) => unreachable!("layer {l:?} on shape {s:?}"),
            }
        }
    }

    pub fn predict(&self, input: &[f64], cache: &mut Cache) -> f64 {
        self.forward(input, cache)
    }

    /// ReLU activity pattern of the last forward pass in `cache`, one mask
    /// per ReLU layer.
    pub fn gate_masks(&self, cache: &Cache) -> Vec<Vec<bool>> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .map(|(li, _)| cache.acts[li].iter().map(|&x| x > 0.0).collect())
            .collect()
    }

    /// Forward pass with every ReLU gate frozen to the given masks instead of
    /// the sign of its input. With frozen gates the network is smooth in its
    /// parameters, which makes central finite differences a valid oracle for
    /// the branch the backward pass differentiates.
    pub fn forward_masked(&self, input: &[f64], cache: &mut Cache, masks: &[Vec<bool>]) -> f64 {
        assert_eq!(input.len(), self.input_len());
        cache.acts[0].copy_from_slice(input);
        let mut relu_idx = 0usize;
        for (li, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Relu) {
                let (before, after) = cache.acts.split_at_mut(li + 1);
                let x = before[li].as_slice();
                let y = after[0].as_mut_slice();
                for ((yo, &xi), &open) in y.iter_mut().zip(x).zip(&masks[relu_idx]) {
                    *yo = if open { xi } else { 0.0 };
                }
                relu_idx += 1;
            } else {
                self.forward_layer(li, cache);
            }
        }
        cache.acts.last().unwrap()[0]
    }

    fn forward_layer(&self, li: usize, cache: &mut Cache) {
        let (before, after) = cache.acts.split_at_mut(li + 1);
        let x = before[li].as_slice();
        let y = after[0].as_mut_slice();
        let p = &self.params[self.offsets[li]..];
        match (self.layers[li], self.shapes[li]) {
            (LayerSpec::Conv { in_c, out_c, k }, Shape::Map { h, w, .. }) => {
                conv_forward(x, y, p, in_c, out_c, k, h, w);
            }
            (LayerSpec::Relu, _) => {
                for (yo, &xi) in y.iter_mut().zip(x) {
                    *yo = xi.max(0.0);
                }
            }
            (LayerSpec::Flatten, _) => y.copy_from_slice(x),
            (LayerSpec::Fc { in_dim, out_dim }, _) => {
                let (wts, bias) = p[..out_dim * in_dim + out_dim].split_at(out_dim * in_dim);
                for o in 0..out_dim {
                    let row = &wts[o * in_dim..(o + 1) * in_dim];
                    let mut s = bias[o];
                    for (wv, &xv) in row.iter().zip(x) {
                        s += wv * xv;
                    }
                    y[o] = s;
                }
            }
            (l, s) => unreachable!("layer {l:?} on shape {s:?}"),
        }
    }
}

/// Reusable per-sample activation and gradient buffers.
pub struct Cache {
    acts: Vec<Vec<f64>>,
    grad: Vec<Vec<f64>>,
}

impl Cache {
    pub fn new(net: &Network) -> Cache {
        let acts: Vec<Vec<f64>> = net.shapes.iter().map(|s| vec![0.0; s.len()]).collect();
        let grad = acts.clone();
        Cache { acts, grad }
    }
}

fn conv_forward(
    x: &[f64],
    y: &mut [f64],
    p: &[f64],
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    w: usize,
) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let (wts, bias) = p[..out_c * in_c * k * k + out_c].split_at(out_c * in_c * k * k);
    for oc in 0..out_c {
        let y_oc = &mut y[oc * oh * ow..(oc + 1) * oh * ow];
        y_oc.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..in_c {
            let x_ic = &x[ic * h * w..(ic + 1) * h * w];
            let w_base = ((oc * in_c) + ic) * k * k;
            if k == 3 {
                // fused 3-tap path; the per-tap additions keep the exact
                // order of the generic loop, so results are bit-identical
                for ky in 0..3 {
                    let w0 = wts[w_base + ky * 3];
                    let w1 = wts[w_base + ky * 3 + 1];
                    let w2 = wts[w_base + ky * 3 + 2];
                    for oy in 0..oh {
                        let xrow = &x_ic[(oy + ky) * w..(oy + ky) * w + ow + 2];
                        let yrow = &mut y_oc[oy * ow..(oy + 1) * ow];
                        for (i, yv) in yrow.iter_mut().enumerate() {
                            *yv += w0 * xrow[i];
                            *yv += w1 * xrow[i + 1];
                            *yv += w2 * xrow[i + 2];
                        }
                    }
                }
                continue;
            }
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wts[w_base + ky * k + kx];
                    for oy in 0..oh {
                        let xrow = &x_ic[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        let yrow = &mut y_oc[oy * ow..(oy + 1) * ow];
                        for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    g_out: &[f64],
    g_in: Option<&mut [f64]>,
    p: &[f64],
    gp: &mut [f64],
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    w: usize,
) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let n_w = out_c * in_c * k * k;
    let wts = &p[..n_w];
    let (gw, gb) = gp[..n_w + out_c].split_at_mut(n_w);
    let mut g_in = g_in;
    if let Some(gi) = g_in.as_deref_mut() {
        gi.iter_mut().for_each(|g| *g = 0.0);
    }
    for oc in 0..out_c {
        let go_oc = &g_out[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] += go_oc.iter().sum::<f64>();
        for ic in 0..in_c {
            let x_ic = &x[ic * h * w..(ic + 1) * h * w];
            let mut gi_ic = g_in
                .as_deref_mut()
                .map(|gi| &mut gi[ic * h * w..(ic + 1) * h * w]);
            let w_base = ((oc * in_c) + ic) * k * k;
            if k == 3 && gi_ic.is_none() {
                // fused 3-tap path for the input layer (no input gradient):
                // three independent accumulator chains per kernel row
                for ky in 0..3 {
                    let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
                    for oy in 0..oh {
                        let go_row = &go_oc[oy * ow..(oy + 1) * ow];
                        let xrow = &x_ic[(oy + ky) * w..(oy + ky) * w + ow + 2];
                        for (i, &go) in go_row.iter().enumerate() {
                            a0 += go * xrow[i];
                            a1 += go * xrow[i + 1];
                            a2 += go * xrow[i + 2];
                        }
                    }
                    gw[w_base + ky * 3] += a0;
                    gw[w_base + ky * 3 + 1] += a1;
                    gw[w_base + ky * 3 + 2] += a2;
                }
                continue;
            }
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wts[w_base + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let go_row = &go_oc[oy * ow..(oy + 1) * ow];
                        let xrow = &x_ic[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        if let Some(gi_ic) = gi_ic.as_deref_mut() {
                            let girow =
                                &mut gi_ic[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                            for ((gi, &go), &xv) in girow.iter_mut().zip(go_row).zip(xrow) {
                                acc += go * xv;
                                *gi += go * wv;
                            }
                        } else {
                            for (&go, &xv) in go_row.iter().zip(xrow) {
                                acc += go * xv;
                            }
                        }
                    }
                    gw[w_base + ky * k + kx] += acc;
                }
            }
        }
    }
}

/// Reorder a `[y][x][channel]` ROI tensor into the `[channel][y][x]` layout
/// the network consumes.
pub fn tensor_to_input(t: &RoiPatchTensor) -> Vec<f64> {
    let g = t.grid;
    let c = t.channels;
    let mut out = vec![0.0f64; g * g * c];
    for y in 0..g {
        for x in 0..g {
            for ch in 0..c {
                out[(ch * g + y) * g + x] = t.at(y, x, ch) as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_is_54577() {
        let net = Network::radhopnet(60, 0);
        assert_eq!(net.param_count(), 54_577);
        // per-layer breakdown
        let counts: Vec<usize> = net.layers.iter().map(|l| l.param_count()).collect();
        let expected = [12_984, 0, 5_208, 0, 5_208, 0, 5_208, 0, 6_944, 0, 0, 18_496, 0, 520, 0, 9];
        assert_eq!(counts, expected);
    }

    #[test]
    fn shapes_shrink_as_documented() {
        let net = Network::radhopnet(60, 0);
        assert_eq!(net.shapes[0], Shape::Map { c: 60, h: 13, w: 13 });
        let maps: Vec<Shape> = net
            .shapes
            .iter()
            .copied()
            .filter(|s| matches!(s, Shape::Map { .. }))
            .collect();
        assert!(maps.contains(&Shape::Map { c: 32, h: 3, w: 3 }));
        assert_eq!(*net.shapes.last().unwrap(), Shape::Flat { d: 1 });
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Network::radhopnet(60, 7);
        let b = Network::radhopnet(60, 7);
        let c = Network::radhopnet(60, 8);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        // first conv: fan_in 540, fan_out 216 -> limit ~0.0891
        let limit = (6.0f64 / (540.0 + 216.0)).sqrt();
        assert!(a.params[..12_960].iter().all(|p| p.abs() < limit));
        // biases start at zero
        assert!(a.params[12_960..12_984].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn forward_matches_hand_computed_tiny_net() {
        // 1-channel 3x3 input, one 3x3 conv to 1 channel, then fc 1 -> 1
        let layers = vec![
            LayerSpec::Conv { in_c: 1, out_c: 1, k: 3 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Fc { in_dim: 1, out_dim: 1 },
        ];
        let mut net = Network::new(layers, Shape::Map { c: 1, h: 3, w: 3 }, 0);
        // conv weights = identity-ish: all ones, bias 0.5; fc weight 2, bias -1
        for p in &mut net.params[..9] {
            *p = 1.0;
        }
        net.params[9] = 0.5;
        net.params[10] = 2.0;
        net.params[11] = -1.0;
        let input: Vec<f64> = (1..=9).map(|v| v as f64 / 10.0).collect();
        let mut cache = Cache::new(&net);
        let out = net.forward(&input, &mut cache);
        // conv out = sum(input) + 0.5 = 4.5 + 0.5 = 5.0; relu 5.0; fc 2 * 5 - 1 = 9
        assert!((out - 9.0).abs() < 1e-12);
    }

    #[test]
    fn conv_translation_consistency() {
        // with a single conv layer, shifting the input shifts the output map
        let layers = vec![LayerSpec::Conv { in_c: 1, out_c: 1, k: 3 }];
        let net = Network::new(layers, Shape::Map { c: 1, h: 6, w: 6 }, 3);
        let mut base = vec![0.0f64; 36];
        base[2 * 6 + 2] = 1.0;
        let mut shifted = vec![0.0f64; 36];
        shifted[2 * 6 + 3] = 1.0;
        let mut cache = Cache::new(&net);
        net.forward(&base, &mut cache);
        let out_base = cache.acts.last().unwrap().clone();
        net.forward(&shifted, &mut cache);
        let out_shift = cache.acts.last().unwrap().clone();
        // output maps are 4x4; the response pattern moves one column right
        for oy in 0..4 {
            for ox in 0..3 {
                assert!((out_base[oy * 4 + ox] - out_shift[oy * 4 + ox + 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::radhopnet(60, 1);
        let input: Vec<f64> = (0..net.input_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut cache = Cache::new(&net);
        let a = net.forward(&input, &mut cache);
        let b = net.forward(&input, &mut cache);
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn tensor_to_input_transposes_layout() {
        let mut t = RoiPatchTensor::zeros(2, 3);
        for i in 0..t.data.len() {
            t.data[i] = i as f32;
        }
        let x = tensor_to_input(&t);
        // x[(ch * 2 + y) * 2 + x] == t.at(y, x, ch)
        for y in 0..2 {
            for xx in 0..2 {
                for ch in 0..3 {
                    assert_eq!(x[(ch * 2 + y) * 2 + xx], t.at(y, xx, ch) as f64);
                }
            }
        }
    }
}
