//! One orientation-specific vision transformer: patchify a view, embed the
//! patches with a class token and learned positions, run pre-norm encoder
//! layers and regress a scalar from the final class token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gaussian, he_normal, join, Linear, MapFn};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::volume::ViewTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub dropout: f64,
    /// Hidden width of the encoder MLP; the regression head reuses it.
    pub mlp_hidden: usize,
    /// Output projection after concatenating heads. Off gives plain
    /// concatenation.
    pub attn_out_proj: bool,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 7,
            embed_dim: 768,
            num_heads: 12,
            num_layers: 10,
            dropout: 0.1,
            mlp_hidden: 3072,
            attn_out_proj: true,
            ln_eps: 1e-5,
        }
    }
}

impl ViTConfig {
    /// Laptop-sized preset with every shape law intact.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            num_layers: 2,
            mlp_hidden: 128,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.num_layers == 0 || self.num_heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(
                "vit.patch_size, num_layers, num_heads and mlp_hidden must be >= 1".into(),
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "vit.embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("vit.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Patch grid of a view after zero-padding to multiples of the patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    /// Grid for a view of `(height, width, channels)`.
    pub fn new(view_dims: [usize; 3], patch_size: usize) -> Self {
        Self {
            rows: view_dims[0].div_ceil(patch_size),
            cols: view_dims[1].div_ceil(patch_size),
            patch_size,
            channels: view_dims[2],
        }
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn padded_dims(&self) -> [usize; 2] {
        [self.rows * self.patch_size, self.cols * self.patch_size]
    }
}

/// Flattens a view into `N × P²C` patches in raster order, zero-padding the
/// in-plane extents up to multiples of `P`. Within a patch the layout is
/// (row, col, channel) with channels fastest.
pub fn patchify<T: Scalar>(view: &ViewTensor, patch_size: usize) -> Tensor<T> {
    let grid = PatchGrid::new(view.dims(), patch_size);
    let p = patch_size;
    let c = view.channels;
    let mut data = vec![T::zero(); grid.num_patches() * grid.patch_len()];
    for pr in 0..grid.rows {
        for pc in 0..grid.cols {
            let base = (pr * grid.cols + pc) * grid.patch_len();
            for dy in 0..p {
                let row = pr * p + dy;
                if row >= view.height {
                    break;
                }
                for dx in 0..p {
                    let col = pc * p + dx;
                    if col >= view.width {
                        break;
                    }
                    let src = (row * view.width + col) * c;
                    let dst = base + (dy * p + dx) * c;
                    for ch in 0..c {
                        data[dst + ch] = T::lit(f64::from(view.data[src + ch]));
                    }
                }
            }
        }
    }
    Tensor::new([grid.num_patches(), grid.patch_len()], data).expect("patch shape")
}

/// Inverse of [`patchify`] onto the padded grid: returns the
/// `(H_pad, W_pad, C)` row-major image.
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, grid: PatchGrid) -> Result<Vec<T>> {
    if patches.shape() != [grid.num_patches(), grid.patch_len()] {
        return Err(Error::dim(
            "unpatchify",
            patches.shape(),
            &[grid.num_patches(), grid.patch_len()],
        ));
    }
    let [hp, wp] = grid.padded_dims();
    let (p, c) = (grid.patch_size, grid.channels);
    let mut out = vec![T::zero(); hp * wp * c];
    for (idx, patch) in patches.data().chunks(grid.patch_len()).enumerate() {
        let (pr, pc) = (idx / grid.cols, idx % grid.cols);
        for dy in 0..p {
            for dx in 0..p {
                let dst = ((pr * p + dy) * wp + pc * p + dx) * c;
                out[dst..dst + c].copy_from_slice(&patch[(dy * p + dx) * c..][..c]);
            }
        }
    }
    Ok(out)
}

/// Post-softmax attention of one head in one layer, `(N+1) × (N+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub tokens: usize,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.tokens..(r + 1) * self.tokens]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    /// Fused query/key/value projection, `D × 3D`.
    pub qkv: Linear<P>,
    pub attn_out: Option<Linear<P>>,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub mlp_in: Linear<P>,
    pub mlp_out: Linear<P>,
}

impl<P> EncoderParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> EncoderParams<Q> {
        EncoderParams {
            ln1_gain: f(&join(prefix, "ln1.gain"), &self.ln1_gain),
            ln1_bias: f(&join(prefix, "ln1.bias"), &self.ln1_bias),
            qkv: self.qkv.map(&join(prefix, "qkv"), f),
            attn_out: self.attn_out.as_ref().map(|l| l.map(&join(prefix, "attn_out"), f)),
            ln2_gain: f(&join(prefix, "ln2.gain"), &self.ln2_gain),
            ln2_bias: f(&join(prefix, "ln2.bias"), &self.ln2_bias),
            mlp_in: self.mlp_in.map(&join(prefix, "mlp_in"), f),
            mlp_out: self.mlp_out.map(&join(prefix, "mlp_out"), f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "ln1.gain"), &self.ln1_gain);
        f(&join(prefix, "ln1.bias"), &self.ln1_bias);
        self.qkv.visit(&join(prefix, "qkv"), f);
        if let Some(l) = &self.attn_out {
            l.visit(&join(prefix, "attn_out"), f);
        }
        f(&join(prefix, "ln2.gain"), &self.ln2_gain);
        f(&join(prefix, "ln2.bias"), &self.ln2_bias);
        self.mlp_in.visit(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit(&join(prefix, "mlp_out"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        f(&join(prefix, "ln1.gain"), &mut self.ln1_gain);
        f(&join(prefix, "ln1.bias"), &mut self.ln1_bias);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        if let Some(l) = &mut self.attn_out {
            l.visit_mut(&join(prefix, "attn_out"), f);
        }
        f(&join(prefix, "ln2.gain"), &mut self.ln2_gain);
        f(&join(prefix, "ln2.bias"), &mut self.ln2_bias);
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
    }
}

/// Learnable arrays of one view encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<P> {
    /// `P²C × D`, no bias.
    pub patch_proj: P,
    /// `(N+1) × D`
    pub pos_embed: P,
    /// `1 × D`
    pub class_token: P,
    pub layers: Vec<EncoderParams<P>>,
    pub head_hidden: Linear<P>,
    pub head_out: Linear<P>,
}

impl<P> ViTParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> ViTParams<Q> {
        ViTParams {
            patch_proj: f(&join(prefix, "patch_proj"), &self.patch_proj),
            pos_embed: f(&join(prefix, "pos_embed"), &self.pos_embed),
            class_token: f(&join(prefix, "class_token"), &self.class_token),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layers.{i}")), f))
                .collect(),
            head_hidden: self.head_hidden.map(&join(prefix, "head_hidden"), f),
            head_out: self.head_out.map(&join(prefix, "head_out"), f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "patch_proj"), &self.patch_proj);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        f(&join(prefix, "class_token"), &self.class_token);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.head_hidden.visit(&join(prefix, "head_hidden"), f);
        self.head_out.visit(&join(prefix, "head_out"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        f(&join(prefix, "patch_proj"), &mut self.patch_proj);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        f(&join(prefix, "class_token"), &mut self.class_token);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.head_hidden.visit_mut(&join(prefix, "head_hidden"), f);
        self.head_out.visit_mut(&join(prefix, "head_out"), f);
    }
}

impl<T: Scalar> ViTParams<Tensor<T>> {
    /// Class token and positions ~ N(0, 0.02²); weights He-normal; biases 0;
    /// layer-norm gains 1.
    pub fn init<R: Rng + ?Sized>(cfg: &ViTConfig, grid: PatchGrid, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderParams {
                ln1_gain: Tensor::ones([d]),
                ln1_bias: Tensor::zeros([d]),
                qkv: Linear::he(d, 3 * d, rng),
                attn_out: cfg.attn_out_proj.then(|| Linear::he(d, d, rng)),
                ln2_gain: Tensor::ones([d]),
                ln2_bias: Tensor::zeros([d]),
                mlp_in: Linear::he(d, cfg.mlp_hidden, rng),
                mlp_out: Linear::he(cfg.mlp_hidden, d, rng),
            })
            .collect();
        Self {
            patch_proj: he_normal([grid.patch_len(), d], grid.patch_len(), rng),
            pos_embed: gaussian([grid.num_tokens(), d], 0.02, rng),
            class_token: gaussian([1, d], 0.02, rng),
            layers,
            head_hidden: Linear::he(d, cfg.mlp_hidden, rng),
            head_out: Linear::he(cfg.mlp_hidden, 1, rng),
        }
    }

    /// Patch grid these parameters were built for.
    pub fn check_grid(&self, grid: PatchGrid) -> Result<()> {
        let expect_proj = grid.patch_len();
        let expect_tokens = grid.num_tokens();
        if self.patch_proj.shape()[0] != expect_proj || self.pos_embed.shape()[0] != expect_tokens {
            return Err(Error::dim(
                "view vs encoder parameters",
                &[expect_tokens, expect_proj],
                &[self.pos_embed.shape()[0], self.patch_proj.shape()[0]],
            ));
        }
        Ok(())
    }
}

/// Train/eval switch plus whether to keep attention matrices.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardMode {
    pub train: bool,
    pub record_attention: bool,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode {
        train: false,
        record_attention: false,
    };
    pub const TRAIN: ForwardMode = ForwardMode {
        train: true,
        record_attention: false,
    };
    pub const EXPLAIN: ForwardMode = ForwardMode {
        train: false,
        record_attention: true,
    };
}

/// `z0 = [class; patches·E] + E_pos`, shape `(N+1) × D`.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    patches: Var,
    params: &ViTParams<Var>,
) -> Result<Var> {
    let projected = tape.matmul(patches, params.patch_proj)?;
    let tokens = tape.concat(&[params.class_token, projected], 0)?;
    tape.add(tokens, params.pos_embed)
}

/// One pre-norm encoder layer:
/// `z' = MSA(LN(z)) + z`, `z_out = MLP(LN(z')) + z'`.
pub fn encoder_layer<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    z: Var,
    layer: &EncoderParams<Var>,
    layer_index: usize,
    cfg: &ViTConfig,
    mode: ForwardMode,
    rng: &mut R,
    records: &mut Vec<AttentionRecord>,
) -> Result<Var> {
    let d = cfg.embed_dim;
    let head_dim = cfg.head_dim();
    let eps = T::lit(cfg.ln_eps);
    let tokens = tape.shape(z)[0];
    if tape.shape(z) != [tokens, d] {
        return Err(Error::dim("encoder_layer", tape.shape(z), &[tokens, d]));
    }

    let normed = tape.layer_norm(z, layer.ln1_gain, layer.ln1_bias, eps)?;
    let qkv = layer.qkv.forward(tape, normed)?;
    let [q, k, v]: [Var; 3] = tape
        .split(qkv, 1, &[d, d, d])?
        .try_into()
        .expect("three projections");
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice(q, 1, h * head_dim, head_dim)?;
        let kh = tape.slice(k, 1, h * head_dim, head_dim)?;
        let vh = tape.slice(v, 1, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        if mode.record_attention {
            records.push(AttentionRecord {
                layer: layer_index,
                head: h,
                tokens,
                weights: tape.value(attn).data().iter().map(|w| w.as_f64()).collect(),
            });
        }
        heads.push(tape.matmul(attn, vh)?);
    }
    let mut msa = tape.concat(&heads, 1)?;
    if let Some(out) = &layer.attn_out {
        msa = out.forward(tape, msa)?;
    }
    let msa = tape.dropout(msa, cfg.dropout, rng, mode.train)?;
    let z_mid = tape.add(msa, z)?;

    let normed = tape.layer_norm(z_mid, layer.ln2_gain, layer.ln2_bias, eps)?;
    let hidden = layer.mlp_in.forward(tape, normed)?;
    let hidden = tape.gelu(hidden);
    let hidden = tape.dropout(hidden, cfg.dropout, rng, mode.train)?;
    let mlp = layer.mlp_out.forward(tape, hidden)?;
    let mlp = tape.dropout(mlp, cfg.dropout, rng, mode.train)?;
    tape.add(mlp, z_mid)
}

/// Result of running one view through its encoder.
#[derive(Debug)]
pub struct ViewOutput {
    /// `1 × 1` scalar prediction in the head's output units.
    pub prediction: Var,
    /// Final-layer class token `z_L^0`, `1 × D`.
    pub class_token: Var,
    pub attention: Vec<AttentionRecord>,
    pub grid: PatchGrid,
}

/// patchify → embed → encoder layers → class-token readout → regression head.
pub fn forward_view<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    view: &ViewTensor,
    params: &ViTParams<Var>,
    cfg: &ViTConfig,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<ViewOutput> {
    let grid = PatchGrid::new(view.dims(), cfg.patch_size);
    let proj_shape = tape.shape(params.patch_proj).to_vec();
    let pos_shape = tape.shape(params.pos_embed).to_vec();
    if proj_shape[0] != grid.patch_len() || pos_shape[0] != grid.num_tokens() {
        return Err(Error::dim(
            "forward_view (tokens, patch length)",
            &[grid.num_tokens(), grid.patch_len()],
            &[pos_shape[0], proj_shape[0]],
        ));
    }
    if params.layers.len() != cfg.num_layers {
        return Err(Error::dim(
            "forward_view (layers)",
            &[cfg.num_layers],
            &[params.layers.len()],
        ));
    }
    let patches = tape.constant(patchify(view, cfg.patch_size));
    let mut z = embed(tape, patches, params)?;
    z = tape.dropout(z, cfg.dropout, rng, mode.train)?;
    let mut attention = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        z = encoder_layer(tape, z, layer, l, cfg, mode, rng, &mut attention)?;
    }
    let class_token = tape.slice(z, 0, 0, 1)?;
    let hidden = params.head_hidden.forward(tape, class_token)?;
    let hidden = tape.gelu(hidden);
    let prediction = params.head_out.forward(tape, hidden)?;
    Ok(ViewOutput {
        prediction,
        class_token,
        attention,
        grid,
    })
}
