//! The Gabformer transformer block.
//!
//! One block is two residual branches applied in sequence:
//!
//! ```text
//! x  = x + MGSA(norm(x))       multi-Gabor transposed channel attention
//! x  = x + FFN(norm(x))        gated (or plain) feed-forward
//! ```
//!
//! Attention runs across channels rather than pixels: per head, queries and
//! keys are `(HW x C/h)` matrices and the attention map is `(C/h x C/h)`,
//! independent of the spatial extents. In the default configuration the
//! query path routes through the fixed Gabor bank between two learnable 1x1
//! convolutions, while keys and values use a 1x1 convolution followed by a
//! 3x3 depthwise convolution.

use crate::error::{Error, Result};
use crate::gabor::{apply_bank, GaborBank};
use crate::params::{Forward, Init, ParamId, ParamStore};
use crate::tensor::{PaddingMode, Tensor, Var};

/// Nonlinearity applied to the channel-attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionFn {
    Softmax,
    /// `relu(K^T Q / xi)` with no renormalization, leaving sparse maps;
    /// all-zero rows are permitted.
    Relu,
}

/// Feed-forward branch flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnKind {
    /// Gated: expand, split, depthwise-convolve both halves, GELU-gate.
    Gffn,
    /// Plain two-layer bottleneck with a GELU between.
    PlainFfn,
}

/// One network configuration of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionVariant {
    /// Build queries through the Gabor bank.
    pub q_gabor: bool,
    /// Build keys and values through the Gabor bank as well.
    pub kv_gabor: bool,
    pub attention_fn: AttentionFn,
    pub ffn_kind: FfnKind,
}

impl Default for AttentionVariant {
    fn default() -> Self {
        Self::gabor_q()
    }
}

impl AttentionVariant {
    /// Default configuration: Gabor queries, plain K/V, softmax, GFFN.
    pub fn gabor_q() -> Self {
        AttentionVariant {
            q_gabor: true,
            kv_gabor: false,
            attention_fn: AttentionFn::Softmax,
            ffn_kind: FfnKind::Gffn,
        }
    }

    /// No Gabor anywhere: Q, K, V all via depthwise convolution.
    pub fn baseline() -> Self {
        AttentionVariant {
            q_gabor: false,
            kv_gabor: false,
            attention_fn: AttentionFn::Softmax,
            ffn_kind: FfnKind::Gffn,
        }
    }

    /// Gabor on queries, keys, and values.
    pub fn gabor_qkv() -> Self {
        AttentionVariant {
            q_gabor: true,
            kv_gabor: true,
            attention_fn: AttentionFn::Softmax,
            ffn_kind: FfnKind::Gffn,
        }
    }

    pub fn gabor_qkv_relu() -> Self {
        AttentionVariant {
            attention_fn: AttentionFn::Relu,
            ..Self::gabor_qkv()
        }
    }

    pub fn gabor_q_relu() -> Self {
        AttentionVariant {
            attention_fn: AttentionFn::Relu,
            ..Self::gabor_q()
        }
    }

    pub fn gabor_q_plain_ffn() -> Self {
        AttentionVariant {
            ffn_kind: FfnKind::PlainFfn,
            ..Self::gabor_q()
        }
    }

    /// The six ablation rows, in table order.
    pub fn all() -> [AttentionVariant; 6] {
        [
            Self::baseline(),
            Self::gabor_qkv(),
            Self::gabor_qkv_relu(),
            Self::gabor_q_relu(),
            Self::gabor_q_plain_ffn(),
            Self::gabor_q(),
        ]
    }

    /// Stable CLI / config name.
    pub fn name(&self) -> &'static str {
        match (self.q_gabor, self.kv_gabor, self.attention_fn, self.ffn_kind) {
            (false, false, AttentionFn::Softmax, FfnKind::Gffn) => "baseline",
            (true, true, AttentionFn::Softmax, FfnKind::Gffn) => "gabor-qkv",
            (true, true, AttentionFn::Relu, FfnKind::Gffn) => "gabor-qkv-relu",
            (true, false, AttentionFn::Relu, FfnKind::Gffn) => "gabor-q-relu",
            (true, false, AttentionFn::Softmax, FfnKind::PlainFfn) => "gabor-q-ffn",
            (true, false, AttentionFn::Softmax, FfnKind::Gffn) => "gabor-q",
            _ => "custom",
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Self::baseline()),
            "gabor-qkv" => Ok(Self::gabor_qkv()),
            "gabor-qkv-relu" => Ok(Self::gabor_qkv_relu()),
            "gabor-q-relu" => Ok(Self::gabor_q_relu()),
            "gabor-q-ffn" => Ok(Self::gabor_q_plain_ffn()),
            "gabor-q" => Ok(Self::gabor_q()),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}`; one of baseline, gabor-qkv, gabor-qkv-relu, \
                 gabor-q-relu, gabor-q-ffn, gabor-q"
            ))),
        }
    }
}

// ── Layers ───────────────────────────────────────────────────────────

/// A convolution layer: weight, bias, and its fixed geometry.
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    groups: usize,
    padding: PaddingMode,
}

impl Conv2dLayer {
    /// Kaiming-uniform weight, zero bias. `k` must be odd.
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        groups: usize,
        padding: PaddingMode,
    ) -> Self {
        let cpg = in_c / groups;
        let fan_in = cpg * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            init.kaiming_uniform(vec![out_c, cpg, k, k], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_c]));
        Conv2dLayer {
            weight,
            bias,
            groups,
            padding,
        }
    }

    pub fn pointwise(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        out_c: usize,
        in_c: usize,
    ) -> Self {
        Self::init(store, init, name, out_c, in_c, 1, 1, PaddingMode::Zero)
    }

    pub fn depthwise(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        Self::init(store, init, name, channels, channels, k, channels, PaddingMode::Reflect)
    }

    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = fw.param(self.weight);
        let b = fw.param(self.bias);
        fw.tape.conv2d(x, w, Some(b), 1, self.padding, self.groups)
    }
}

/// Channel-wise layer normalization with a learnable scale and no bias.
pub struct LayerNormChannel {
    pub scale: ParamId,
    pub eps: f64,
}

impl LayerNormChannel {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        LayerNormChannel {
            scale: store.add(format!("{name}.scale"), Tensor::full(vec![channels], 1.0)),
            eps: 1e-10,
        }
    }

    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let normed = fw.tape.channel_norm(x, self.eps)?;
        let s = fw.param(self.scale);
        fw.tape.scale_channels(normed, s)
    }
}

/// How one of the Q/K/V features is produced from the normalized input.
enum FeaturePath {
    /// 1x1 conv -> Gabor bank sum -> 1x1 conv.
    Gabor {
        conv_in: Conv2dLayer,
        conv_out: Conv2dLayer,
    },
    /// 1x1 conv -> 3x3 depthwise conv.
    Dw {
        conv_in: Conv2dLayer,
        dw: Conv2dLayer,
    },
}

impl FeaturePath {
    fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        gabor: bool,
    ) -> Self {
        let conv_in = Conv2dLayer::pointwise(store, init, &format!("{name}.conv_in"), channels, channels);
        if gabor {
            FeaturePath::Gabor {
                conv_in,
                conv_out: Conv2dLayer::pointwise(store, init, &format!("{name}.conv_out"), channels, channels),
            }
        } else {
            FeaturePath::Dw {
                conv_in,
                dw: Conv2dLayer::depthwise(store, init, &format!("{name}.dw"), channels, 3),
            }
        }
    }

    fn forward(&self, fw: &mut Forward<'_>, x: Var, bank: &GaborBank) -> Result<Var> {
        match self {
            FeaturePath::Gabor { conv_in, conv_out } => {
                let h = conv_in.forward(fw, x)?;
                let g = apply_bank(fw, h, bank)?;
                conv_out.forward(fw, g)
            }
            FeaturePath::Dw { conv_in, dw } => {
                let h = conv_in.forward(fw, x)?;
                dw.forward(fw, h)
            }
        }
    }
}

/// Multi-Gabor self attention: transposed (channel) attention whose query
/// path carries summed multi-wavelength, multi-orientation Gabor responses.
pub struct Mgsa {
    norm: LayerNormChannel,
    q: FeaturePath,
    k: FeaturePath,
    v: FeaturePath,
    out_proj: Conv2dLayer,
    /// Learnable per-head temperature dividing the logits.
    pub xi: ParamId,
    pub heads: usize,
    pub channels: usize,
    attention_fn: AttentionFn,
}

/// Intermediate handles from an attention forward, for inspection in tests
/// and diagnostics.
pub struct MgsaTrace {
    pub out: Var,
    /// Attention maps, `[B*heads, C/h, C/h]`, after softmax/relu.
    pub attn: Var,
    pub value: Var,
}

impl Mgsa {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
        variant: &AttentionVariant,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        let norm = LayerNormChannel::init(store, &format!("{name}.norm"), channels);
        let q = FeaturePath::init(store, init, &format!("{name}.q"), channels, variant.q_gabor);
        let k = FeaturePath::init(store, init, &format!("{name}.k"), channels, variant.kv_gabor);
        let v = FeaturePath::init(store, init, &format!("{name}.v"), channels, variant.kv_gabor);
        let out_proj = Conv2dLayer::pointwise(store, init, &format!("{name}.proj"), channels, channels);
        let xi_init = ((channels / heads) as f64).sqrt();
        let xi = store.add(format!("{name}.xi"), Tensor::full(vec![heads], xi_init));
        Ok(Mgsa {
            norm,
            q,
            k,
            v,
            out_proj,
            xi,
            heads,
            channels,
            attention_fn: variant.attention_fn,
        })
    }

    /// `x + proj(Att(Q, K, V))`, where Q/K/V come from the normalized input
    /// and the residual carries the raw input.
    pub fn forward(&self, fw: &mut Forward<'_>, x: Var, bank: &GaborBank) -> Result<Var> {
        Ok(self.forward_traced(fw, x, bank)?.out)
    }

    pub fn forward_traced(&self, fw: &mut Forward<'_>, x: Var, bank: &GaborBank) -> Result<MgsaTrace> {
        let shape = fw.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "attention input {:?} does not match channels {}",
                shape, self.channels
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (heads, cph, hw) = (self.heads, c / self.heads, h * w);

        let normed = self.norm.forward(fw, x)?;
        let q = self.q.forward(fw, normed, bank)?;
        let k = self.k.forward(fw, normed, bank)?;
        let v = self.v.forward(fw, normed, bank)?;

        // Channel-major head split: [B, C, H, W] -> [B*heads, C/h, HW] is a
        // pure reshape because C factors as heads x C/h in order.
        let q3 = fw.tape.reshape(q, vec![b * heads, cph, hw])?;
        let k3 = fw.tape.reshape(k, vec![b * heads, cph, hw])?;
        let v3 = fw.tape.reshape(v, vec![b * heads, cph, hw])?;

        // K^T Q in math convention (rows/cols over channels) is the
        // row-by-row product of the stored [C/h, HW] matrices.
        let logits = fw.tape.matmul_nt(k3, q3)?;
        let xi = fw.param(self.xi);
        let scaled = fw.tape.div_head_scale(logits, xi, heads)?;
        let attn = match self.attention_fn {
            AttentionFn::Softmax => fw.tape.softmax(scaled, 2)?,
            AttentionFn::Relu => fw.tape.relu(scaled)?,
        };

        // out = V map, assembled in the stored layout: out3 = map^T v3.
        let out3 = fw.tape.matmul_tn(attn, v3)?;
        let merged = fw.tape.reshape(out3, vec![b, c, h, w])?;
        let projected = self.out_proj.forward(fw, merged)?;
        let out = fw.tape.add(x, projected)?;
        Ok(MgsaTrace {
            out,
            attn,
            value: v3,
        })
    }
}

/// Gated feed-forward: expand channels by `2 epsilon`, split, depthwise
/// convolve each half, gate one with the GELU of the other, project back.
pub struct Gffn {
    norm: LayerNormChannel,
    expand: Conv2dLayer,
    dw_value: Conv2dLayer,
    dw_gate: Conv2dLayer,
    project: Conv2dLayer,
    hidden: usize,
}

/// Hidden width for an expansion ratio, rounded to an integer channel count.
pub fn hidden_channels(channels: usize, epsilon: f64) -> usize {
    (channels as f64 * epsilon).round() as usize
}

impl Gffn {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        epsilon: f64,
    ) -> Self {
        let hidden = hidden_channels(channels, epsilon);
        Gffn {
            norm: LayerNormChannel::init(store, &format!("{name}.norm"), channels),
            expand: Conv2dLayer::pointwise(store, init, &format!("{name}.expand"), 2 * hidden, channels),
            dw_value: Conv2dLayer::depthwise(store, init, &format!("{name}.dw_value"), hidden, 3),
            dw_gate: Conv2dLayer::depthwise(store, init, &format!("{name}.dw_gate"), hidden, 3),
            project: Conv2dLayer::pointwise(store, init, &format!("{name}.project"), channels, hidden),
            hidden,
        }
    }

    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let normed = self.norm.forward(fw, x)?;
        let expanded = self.expand.forward(fw, normed)?;
        let value = fw.tape.narrow(expanded, 1, 0, self.hidden)?;
        let gate = fw.tape.narrow(expanded, 1, self.hidden, self.hidden)?;
        let value = self.dw_value.forward(fw, value)?;
        let gate = self.dw_gate.forward(fw, gate)?;
        let gate = fw.tape.gelu(gate)?;
        let gated = fw.tape.mul(value, gate)?;
        let projected = self.project.forward(fw, gated)?;
        fw.tape.add(x, projected)
    }
}

/// Ablation feed-forward: norm, expand, GELU, project; no gating, no
/// depthwise convolutions.
pub struct PlainFfn {
    norm: LayerNormChannel,
    expand: Conv2dLayer,
    project: Conv2dLayer,
}

impl PlainFfn {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        epsilon: f64,
    ) -> Self {
        let hidden = hidden_channels(channels, epsilon);
        PlainFfn {
            norm: LayerNormChannel::init(store, &format!("{name}.norm"), channels),
            expand: Conv2dLayer::pointwise(store, init, &format!("{name}.expand"), hidden, channels),
            project: Conv2dLayer::pointwise(store, init, &format!("{name}.project"), channels, hidden),
        }
    }

    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let normed = self.norm.forward(fw, x)?;
        let expanded = self.expand.forward(fw, normed)?;
        let activated = fw.tape.gelu(expanded)?;
        let projected = self.project.forward(fw, activated)?;
        fw.tape.add(x, projected)
    }
}

pub enum FfnLayer {
    Gffn(Gffn),
    Plain(PlainFfn),
}

impl FfnLayer {
    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        match self {
            FfnLayer::Gffn(g) => g.forward(fw, x),
            FfnLayer::Plain(p) => p.forward(fw, x),
        }
    }
}

/// One transformer block: attention branch then feed-forward branch, each
/// with its own pre-norm and residual.
pub struct Block {
    pub mgsa: Mgsa,
    pub ffn: FfnLayer,
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
        epsilon: f64,
        variant: &AttentionVariant,
    ) -> Result<Self> {
        let mgsa = Mgsa::init(store, init, &format!("{name}.mgsa"), channels, heads, variant)?;
        let ffn = match variant.ffn_kind {
            FfnKind::Gffn => FfnLayer::Gffn(Gffn::init(
                store,
                init,
                &format!("{name}.gffn"),
                channels,
                epsilon,
            )),
            FfnKind::PlainFfn => FfnLayer::Plain(PlainFfn::init(
                store,
                init,
                &format!("{name}.ffn"),
                channels,
                epsilon,
            )),
        };
        Ok(Block { mgsa, ffn })
    }

    pub fn forward(&self, fw: &mut Forward<'_>, x: Var, bank: &GaborBank) -> Result<Var> {
        let attended = self.mgsa.forward(fw, x, bank)?;
        self.ffn.forward(fw, attended)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn rand_input(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&mut rng, shape, -1.0, 1.0)
    }

    fn build_block(channels: usize, heads: usize, variant: AttentionVariant, seed: u64) -> (ParamStore, Block) {
        let mut store = ParamStore::new();
        let mut init = Init::from_seed(seed);
        let block = Block::init(&mut store, &mut init, "blk", channels, heads, 2.66, &variant).unwrap();
        (store, block)
    }

    #[test]
    fn block_preserves_shape() {
        let bank = GaborBank::default_bank();
        let (store, block) = build_block(8, 2, AttentionVariant::gabor_q(), 3);
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store);
        let x = fw.tape.constant(&rand_input(1, vec![2, 8, 12, 10]));
        let y = block.forward(&mut fw, x, &bank).unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 12, 10]);
    }

    #[test]
    fn attention_map_extents_are_channel_by_channel() {
        // C=32, h=4 must give an 8x8 map per head regardless of H, W.
        let bank = GaborBank::default_bank();
        let (store, block) = build_block(32, 4, AttentionVariant::gabor_q(), 5);
        for (h, w) in [(8, 8), (16, 12)] {
            let mut tape = Tape::new();
            let mut fw = Forward::new(&mut tape, &store);
            let x = fw.tape.constant(&rand_input(2, vec![1, 32, h, w]));
            let trace = block.mgsa.forward_traced(&mut fw, x, &bank).unwrap();
            assert_eq!(tape.shape(trace.attn), &[4, 8, 8]);
        }
    }

    #[test]
    fn softmax_attention_rows_sum_to_one() {
        let bank = GaborBank::default_bank();
        let (store, block) = build_block(16, 4, AttentionVariant::gabor_q(), 7);
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store);
        let x = fw.tape.constant(&rand_input(3, vec![2, 16, 8, 8]));
        let trace = block.mgsa.forward_traced(&mut fw, x, &bank).unwrap();
        let attn = tape.value(trace.attn);
        let s = attn.shape().to_vec();
        for row_block in 0..s[0] {
            for r in 0..s[1] {
                let base = (row_block * s[1] + r) * s[2];
                let sum: f64 = attn.data()[base..base + s[2]].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            }
        }
    }

    #[test]
    fn scalar_channel_attention_map_is_one() {
        // C=1, h=1: the logit is a single scalar and softmax of it is 1.0,
        // so the attention output equals proj(V) + x.
        let bank = GaborBank::default_bank();
        let (store, block) = build_block(1, 1, AttentionVariant::gabor_q(), 9);
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store);
        let x = fw.tape.constant(&rand_input(4, vec![1, 1, 8, 8]));
        let trace = block.mgsa.forward_traced(&mut fw, x, &bank).unwrap();
        assert_eq!(fw.tape.shape(trace.attn), &[1, 1, 1]);
        assert_eq!(fw.tape.data(trace.attn), &[1.0]);

        // Recompose proj(V) + x from the traced value feature.
        let v4 = fw.tape.reshape(trace.value, vec![1, 1, 8, 8]).unwrap();
        let projected = block.mgsa.out_proj.forward(&mut fw, v4).unwrap();
        let expected = fw.tape.add(x, projected).unwrap();
        assert_eq!(tape.data(trace.out), tape.data(expected));
    }

    #[test]
    fn zeroed_parameters_make_the_block_an_identity() {
        let bank = GaborBank::default_bank();
        let (mut store, block) = build_block(8, 2, AttentionVariant::gabor_q(), 11);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".xi") {
                continue; // temperature must stay nonzero
            }
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store);
        let input = rand_input(5, vec![1, 8, 8, 8]);
        let x = fw.tape.constant(&input);
        let y = block.forward(&mut fw, x, &bank).unwrap();
        assert_eq!(tape.data(y), input.data());
    }

    #[test]
    fn zero_input_zero_bias_gffn_outputs_zero() {
        let (store, _) = build_block(4, 1, AttentionVariant::gabor_q(), 13);
        let mut init = Init::from_seed(13);
        let mut store2 = ParamStore::new();
        let gffn = Gffn::init(&mut store2, &mut init, "g", 4, 2.66);
        drop(store);
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store2);
        let x = fw.tape.constant(&Tensor::zeros(vec![1, 4, 6, 6]));
        let y = gffn.forward(&mut fw, x).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_ffn_has_fewer_parameters_than_gffn() {
        let mut store_g = ParamStore::new();
        let mut init_g = Init::from_seed(1);
        Gffn::init(&mut store_g, &mut init_g, "g", 16, 2.66);
        let mut store_p = ParamStore::new();
        let mut init_p = Init::from_seed(1);
        PlainFfn::init(&mut store_p, &mut init_p, "p", 16, 2.66);
        assert!(store_p.total_scalars() < store_g.total_scalars());
    }

    #[test]
    fn all_six_variants_run_forward_and_backward() {
        let bank = GaborBank::default_bank();
        for variant in AttentionVariant::all() {
            let (store, block) = build_block(8, 2, variant, 17);
            let mut tape = Tape::new();
            let mut fw = Forward::new(&mut tape, &store);
            let x = fw.tape.constant(&rand_input(6, vec![1, 8, 16, 16]));
            let y = block.forward(&mut fw, x, &bank).unwrap();
            let loss = fw.tape.sum_all(y).unwrap();
            fw.tape.backward(loss).unwrap();
            assert!(
                fw.grads().iter().filter(|g| g.is_some()).count() > 0,
                "variant {} produced no gradients",
                variant.name()
            );
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AttentionVariant::all() {
            assert_eq!(AttentionVariant::by_name(v.name()).unwrap(), v);
        }
        assert!(AttentionVariant::by_name("nope").is_err());
    }

    #[test]
    fn relu_variant_permits_all_zero_rows() {
        let bank = GaborBank::default_bank();
        let (store, block) = build_block(4, 1, AttentionVariant::gabor_q_relu(), 19);
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store);
        let x = fw.tape.constant(&Tensor::zeros(vec![1, 4, 8, 8]));
        // Zero input gives zero logits, relu keeps them zero; must not error.
        let trace = block.mgsa.forward_traced(&mut fw, x, &bank).unwrap();
        assert!(tape.data(trace.attn).iter().all(|&v| v == 0.0));
    }
}
