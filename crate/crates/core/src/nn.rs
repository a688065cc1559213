//! Parameter storage and the small set of network building blocks used by
//! every model: linear layers, MLPs, a GRU-style gated cell, and
//! non-overlapping-friendly strided conv / transposed-conv layers over
//! NHWC images.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{PatchGeom, Tensor};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors. Each model owns one.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Order-sensitive FNV-1a checksum over names and raw bytes; used by
    /// frozen-parameter assertions.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::rng::Fnv1a::new();
        for (name, t) in &self.entries {
            h.write(name.as_bytes());
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Copy values from another set with identical layout.
    pub fn copy_from(&mut self, other: &ParamSet) {
        assert_eq!(self.entries.len(), other.entries.len(), "param set layout mismatch");
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(dst.shape(), src.shape(), "param shape mismatch");
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

/// Activation used between MLP layers and at the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    fn init_std(&self, fan_in: usize) -> f64 {
        match self {
            Activation::Relu => (2.0 / fan_in as f64).sqrt(),
            _ => (1.0 / fan_in as f64).sqrt(),
        }
    }
}

/// Fully connected layer; weight is stored `[in, out]` so the forward
/// pass is a plain `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init_std: f64,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::randn(&[in_dim, out_dim], init_std, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Multi-layer perceptron with a shared hidden activation and a separate
/// output activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_act: Activation,
    pub out_act: Activation,
    pub dims: Vec<usize>,
}

impl Mlp {
    /// `dims` lists every width including input and output, e.g.
    /// `[192, 256, 256, 12]`.
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        assert!(dims.iter().all(|&d| d > 0), "mlp dims must be positive");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let act = if i + 2 == dims.len() { out_act } else { hidden_act };
            let std = act.init_std(dims[i]).min(hidden_act.init_std(dims[i]));
            layers.push(Linear::new(
                ps,
                rng,
                &format!("{name}.{i}"),
                dims[i],
                dims[i + 1],
                std,
            ));
        }
        Mlp { layers, hidden_act, out_act, dims: dims.to_vec() }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, ps, h);
            h = if i == last {
                self.out_act.apply(g, h)
            } else {
                self.hidden_act.apply(g, h)
            };
        }
        h
    }

    /// Σ (w_i · w_{i+1} + w_{i+1}) over consecutive widths.
    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// GRU-style gated recurrent cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: ParamId, // [in, 3H]
    pub wh: ParamId, // [H, 3H]
    pub b_reset: ParamId,
    pub b_update: ParamId,
    pub b_cand: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, in_dim: usize, hidden: usize) -> Self {
        let std_x = (1.0 / in_dim as f64).sqrt();
        let std_h = (1.0 / hidden as f64).sqrt();
        GruCell {
            wx: ps.add(format!("{name}.wx"), Tensor::randn(&[in_dim, 3 * hidden], std_x, rng)),
            wh: ps.add(format!("{name}.wh"), Tensor::randn(&[hidden, 3 * hidden], std_h, rng)),
            b_reset: ps.add(format!("{name}.br"), Tensor::zeros(&[hidden])),
            b_update: ps.add(format!("{name}.bu"), Tensor::zeros(&[hidden])),
            b_cand: ps.add(format!("{name}.bc"), Tensor::zeros(&[hidden])),
            hidden,
        }
    }

    /// One step: `x` is `[B, in]`, `h` is `[B, H]`; returns the next `[B, H]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let wx = g.param(ps, self.wx);
        let wh = g.param(ps, self.wh);
        let gx = g.matmul(x, wx);
        let gh = g.matmul(h, wh);

        let br = g.param(ps, self.b_reset);
        let bu = g.param(ps, self.b_update);
        let bc = g.param(ps, self.b_cand);

        let gx_r = g.slice_cols(gx, 0, hd);
        let gh_r = g.slice_cols(gh, 0, hd);
        let pre_r = g.add(gx_r, gh_r);
        let pre_r = g.add_bias(pre_r, br);
        let reset = g.sigmoid(pre_r);

        let gx_u = g.slice_cols(gx, hd, hd);
        let gh_u = g.slice_cols(gh, hd, hd);
        let pre_u = g.add(gx_u, gh_u);
        let pre_u = g.add_bias(pre_u, bu);
        let update = g.sigmoid(pre_u);

        let gx_c = g.slice_cols(gx, 2 * hd, hd);
        let gh_c = g.slice_cols(gh, 2 * hd, hd);
        let gated = g.mul(reset, gh_c);
        let pre_c = g.add(gx_c, gated);
        let pre_c = g.add_bias(pre_c, bc);
        let cand = g.tanh(pre_c);

        // h' = u ⊙ h + (1 − u) ⊙ c
        let keep = g.mul(update, h);
        let one_minus_u = g.scale(update, -1.0);
        let one_minus_u = g.add_scalar(one_minus_u, 1.0);
        let take = g.mul(one_minus_u, cand);
        g.add(keep, take)
    }
}

/// Strided convolution over NHWC images, implemented as patch extraction
/// followed by a matmul.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId, // [k·k·Cin, Cout]
    pub b: ParamId, // [Cout]
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            w: ps.add(format!("{name}.w"), Tensor::randn(&[fan_in, c_out], std, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            kernel,
            stride,
            pad,
            c_in,
            c_out,
        }
    }

    /// `x` is `[B, H, W, Cin]`; returns `[B, Ho, Wo, Cout]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "conv input must be [B,H,W,C]");
        let geom = PatchGeom {
            batch: shape[0],
            height: shape[1],
            width: shape[2],
            channels: shape[3],
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let cols = g.im2col(x, geom);
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(cols, w);
        let y = g.add_bias(y, b);
        g.reshape(y, &[shape[0], ho, wo, self.c_out])
    }
}

/// Transposed convolution over NHWC images (matmul followed by the
/// adjoint patch scatter).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId, // [Cin, k·k·Cout]
    pub b: ParamId, // [Cout]
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose2d {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (1.0 / c_in as f64).sqrt();
        ConvTranspose2d {
            w: ps.add(
                format!("{name}.w"),
                Tensor::randn(&[c_in, kernel * kernel * c_out], std, rng),
            ),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            kernel,
            stride,
            pad,
            c_in,
            c_out,
        }
    }

    /// Output spatial size for a given input size.
    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size - 1) * self.stride + self.kernel - 2 * self.pad
    }

    /// `x` is `[B, Hi, Wi, Cin]`; returns `[B, Ho, Wo, Cout]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "deconv input must be [B,H,W,C]");
        let (batch, hi, wi) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (self.out_size(hi), self.out_size(wi));
        let geom = PatchGeom {
            batch,
            height: ho,
            width: wo,
            channels: self.c_out,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        assert_eq!(geom.out_height(), hi, "deconv geometry");
        assert_eq!(geom.out_width(), wi, "deconv geometry");
        let flat = g.reshape(x, &[batch * hi * wi, self.c_in]);
        let w = g.param(ps, self.w);
        let cols = g.matmul(flat, w);
        let img = g.col2im(cols, geom);
        // Channel bias across the NHWC output.
        let flat_img = g.reshape(img, &[batch * ho * wo, self.c_out]);
        let b = g.param(ps, self.b);
        let biased = g.add_bias(flat_img, b);
        g.reshape(biased, &[batch, ho, wo, self.c_out])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_param_count_matches_formula() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(
            &mut ps,
            &mut rng,
            "m",
            &[5, 8, 3],
            Activation::Relu,
            Activation::Identity,
        );
        assert_eq!(mlp.param_count(), 5 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(ps.total_values(), mlp.param_count());
    }

    #[test]
    fn conv_shapes() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut ps, &mut rng, "c", 3, 8, 4, 2, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 16, 16, 3]));
        let y = conv.forward(&mut g, &ps, x);
        assert_eq!(g.shape(y), &[2, 8, 8, 8]);

        let deconv = ConvTranspose2d::new(&mut ps, &mut rng, "d", 8, 3, 4, 2, 1);
        let z = deconv.forward(&mut g, &ps, y);
        assert_eq!(g.shape(z), &[2, 16, 16, 3]);
    }

    #[test]
    fn gru_shapes_and_determinism() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gru = GruCell::new(&mut ps, &mut rng, "g", 6, 10);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 6], 1.0, &mut rng));
        let h = g.constant(Tensor::zeros(&[4, 10]));
        let h1 = gru.forward(&mut g, &ps, x, h);
        let h2 = gru.forward(&mut g, &ps, x, h);
        assert_eq!(g.shape(h1), &[4, 10]);
        assert_eq!(g.value(h1).data(), g.value(h2).data());
    }
}
