//! The full 4-level symmetric encoder-decoder model.
//!
//! Pipeline: a 3x3 input convolution lifts RGB to `C0` channels; three
//! encoder levels at widths `C0, 2 C0, 4 C0` each end in a downsample
//! (pixel-unshuffle then 1x1 conv, halving the unshuffled channel count); an
//! 8 C0 bottleneck stack; three decoder levels mirror the encoder with
//! upsampling (1x1 conv doubling channels, then pixel-shuffle) and skip
//! fusion (concat with the encoder feature, 1x1 conv back to the level
//! width); a final 3x3 convolution produces a residual image added to the
//! input.

use crate::blocks::{AttentionVariant, Block, Conv2dLayer};
use crate::error::{Error, Result};
use crate::gabor::GaborBank;
use crate::params::{Forward, Init, ParamId, ParamStore};
use crate::tensor::{PaddingMode, Tape, Tensor, Var};

/// Named size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Toy,
    Custom,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Toy => "toy",
            Preset::Custom => "custom",
        }
    }
}

/// Everything that determines the architecture (not the weights).
#[derive(Clone, Debug, PartialEq)]
pub struct GabformerConfig {
    pub preset: Preset,
    pub base_channels: usize,
    pub block_counts: [usize; 4],
    pub head_counts: [usize; 4],
    pub epsilon: f64,
    pub gabor_ksize: usize,
    pub variant: AttentionVariant,
    /// Zero the final convolution so the freshly built model is the
    /// identity map (training then starts from the rainy baseline).
    pub final_conv_zero_init: bool,
}

impl GabformerConfig {
    /// Full-scale preset: base width 56, blocks {4, 6, 6, 8}.
    ///
    /// The width is chosen so the parameter count of this reconstruction
    /// lands on the published ~34.4M budget; see the guide's parameter
    /// budget chapter for the exact per-component breakdown.
    pub fn full() -> Self {
        GabformerConfig {
            preset: Preset::Full,
            base_channels: 56,
            block_counts: [4, 6, 6, 8],
            head_counts: [1, 2, 4, 8],
            epsilon: 2.66,
            gabor_ksize: 7,
            variant: AttentionVariant::gabor_q(),
            final_conv_zero_init: true,
        }
    }

    /// Desk-scale preset for training and gradient checks.
    pub fn toy() -> Self {
        GabformerConfig {
            preset: Preset::Toy,
            base_channels: 8,
            block_counts: [1, 1, 1, 2],
            head_counts: [1, 2, 4, 8],
            epsilon: 2.66,
            gabor_ksize: 7,
            variant: AttentionVariant::gabor_q(),
            final_conv_zero_init: true,
        }
    }

    pub fn by_preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}`; expected toy or full"
            ))),
        }
    }

    /// Channel widths per level: `[C0, 2 C0, 4 C0, 8 C0]`.
    pub fn level_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be positive"));
        }
        for (level, (&c, &h)) in self
            .level_channels()
            .iter()
            .zip(&self.head_counts)
            .enumerate()
        {
            if h == 0 || c % h != 0 {
                return Err(Error::invalid(format!(
                    "level {level}: channels {c} not divisible by heads {h}"
                )));
            }
        }
        if self.block_counts.iter().any(|&n| n == 0) {
            return Err(Error::invalid("every level needs at least one block"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.gabor_ksize < 3 || self.gabor_ksize % 2 == 0 {
            return Err(Error::invalid("gabor_ksize must be odd and >= 3"));
        }
        Ok(())
    }

    /// Minimum spatial extent the model accepts: three 2x downsamples plus
    /// the reflect padding of the Gabor kernels at the bottleneck.
    pub fn min_spatial(&self) -> usize {
        8 * ((self.gabor_ksize - 1) / 2 + 1)
    }

    // ── Canonical key=value text form ────────────────────────────────
    //
    // Used verbatim inside checkpoints and accepted by the CLI config file.

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("preset={}\n", self.preset.name()));
        s.push_str(&format!("base_channels={}\n", self.base_channels));
        s.push_str(&format!(
            "block_counts={},{},{},{}\n",
            self.block_counts[0], self.block_counts[1], self.block_counts[2], self.block_counts[3]
        ));
        s.push_str(&format!(
            "head_counts={},{},{},{}\n",
            self.head_counts[0], self.head_counts[1], self.head_counts[2], self.head_counts[3]
        ));
        s.push_str(&format!("epsilon={}\n", self.epsilon));
        s.push_str(&format!("gabor_ksize={}\n", self.gabor_ksize));
        s.push_str(&format!("variant={}\n", self.variant.name()));
        s.push_str(&format!(
            "final_conv_zero_init={}\n",
            self.final_conv_zero_init
        ));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = GabformerConfig::toy();
        cfg.preset = Preset::Custom;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.apply_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` setting; unknown keys are errors.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::format(format!("bad value `{value}` for {key}")))
        }
        fn quad(key: &str, value: &str) -> Result<[usize; 4]> {
            let parts: Vec<usize> = value
                .split(',')
                .map(|p| num::<usize>(key, p.trim()))
                .collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| Error::format(format!("{key} needs exactly 4 comma-separated values")))
        }
        match key {
            "preset" => {
                *self = GabformerConfig::by_preset(value)?;
            }
            "base_channels" => self.base_channels = num(key, value)?,
            "block_counts" => self.block_counts = quad(key, value)?,
            "head_counts" => self.head_counts = quad(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "gabor_ksize" => self.gabor_ksize = num(key, value)?,
            "variant" => self.variant = AttentionVariant::by_name(value)?,
            "final_conv_zero_init" => self.final_conv_zero_init = num(key, value)?,
            other => {
                return Err(Error::format(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }
}

/// A built model: parameter store plus the layer structure referencing it.
pub struct GabformerModel {
    pub config: GabformerConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub bank: GaborBank,
    in_conv: Conv2dLayer,
    encoders: Vec<Vec<Block>>,
    downs: Vec<Conv2dLayer>,
    latent: Vec<Block>,
    ups: Vec<Conv2dLayer>,
    fuses: Vec<Conv2dLayer>,
    decoders: Vec<Vec<Block>>,
    out_conv: Conv2dLayer,
    final_weight: ParamId,
    final_bias: ParamId,
}

/// Optional knobs for an instrumented forward pass.
#[derive(Default)]
pub struct ForwardOptions {
    /// Zero out the skip connection feeding decoder level k (0, 1, 2).
    pub ablate_skips: [bool; 3],
    /// Collect (stage, shape) pairs.
    pub trace: bool,
}

pub struct ForwardRun {
    pub output: Var,
    pub trace: Vec<(String, Vec<usize>)>,
}

impl GabformerModel {
    /// Deterministically initialize a model from a config and seed.
    pub fn build(config: GabformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::from_seed(seed);
        let widths = config.level_channels();
        let eps = config.epsilon;
        let variant = &config.variant;
        let bank = GaborBank::default_bank_with_ksize(config.gabor_ksize);

        let in_conv = Conv2dLayer::init(
            &mut store,
            &mut init,
            "input_conv",
            widths[0],
            3,
            3,
            1,
            PaddingMode::Reflect,
        );

        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for level in 0..3 {
            let mut blocks = Vec::new();
            for b in 0..config.block_counts[level] {
                blocks.push(Block::init(
                    &mut store,
                    &mut init,
                    &format!("encoder{level}.block{b}"),
                    widths[level],
                    config.head_counts[level],
                    eps,
                    variant,
                )?);
            }
            encoders.push(blocks);
            // Unshuffle quadruples channels; the 1x1 conv halves that to 2C.
            downs.push(Conv2dLayer::pointwise(
                &mut store,
                &mut init,
                &format!("down{level}"),
                2 * widths[level],
                4 * widths[level],
            ));
        }

        let mut latent = Vec::new();
        for b in 0..config.block_counts[3] {
            latent.push(Block::init(
                &mut store,
                &mut init,
                &format!("latent.block{b}"),
                widths[3],
                config.head_counts[3],
                eps,
                variant,
            )?);
        }

        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoders = Vec::new();
        for level in (0..3).rev() {
            let above = if level == 2 { widths[3] } else { widths[level + 1] };
            // Doubling then shuffling by 2 halves the width: above -> above/2.
            ups.push(Conv2dLayer::pointwise(
                &mut store,
                &mut init,
                &format!("up{level}"),
                2 * above,
                above,
            ));
            fuses.push(Conv2dLayer::pointwise(
                &mut store,
                &mut init,
                &format!("fuse{level}"),
                widths[level],
                2 * widths[level],
            ));
            let mut blocks = Vec::new();
            for b in 0..config.block_counts[level] {
                blocks.push(Block::init(
                    &mut store,
                    &mut init,
                    &format!("decoder{level}.block{b}"),
                    widths[level],
                    config.head_counts[level],
                    eps,
                    variant,
                )?);
            }
            decoders.push(blocks);
        }

        let out_conv = Conv2dLayer::init(
            &mut store,
            &mut init,
            "output_conv",
            3,
            widths[0],
            3,
            1,
            PaddingMode::Reflect,
        );
        let final_weight = store.find("output_conv.weight").expect("just added");
        let final_bias = store.find("output_conv.bias").expect("just added");
        let mut model = GabformerModel {
            config,
            seed,
            store,
            bank,
            in_conv,
            encoders,
            downs,
            latent,
            ups,
            fuses,
            decoders,
            out_conv,
            final_weight,
            final_bias,
        };
        if model.config.final_conv_zero_init {
            model.store.value_mut(model.final_weight).data_mut().fill(0.0);
            model.store.value_mut(model.final_bias).data_mut().fill(0.0);
        }
        Ok(model)
    }

    /// Derain one batch: `output = input + residual`. Input must be
    /// `B x 3 x H x W` with `H`, `W` multiples of 8 and at least
    /// [`GabformerConfig::min_spatial`].
    pub fn forward(&self, fw: &mut Forward<'_>, image: Var) -> Result<Var> {
        Ok(self
            .forward_opts(fw, image, &ForwardOptions::default())?
            .output)
    }

    pub fn forward_opts(
        &self,
        fw: &mut Forward<'_>,
        image: Var,
        opts: &ForwardOptions,
    ) -> Result<ForwardRun> {
        let shape = fw.tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!(
                "expected B x 3 x H x W input, got {:?}",
                shape
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let min = self.config.min_spatial();
        if h % 8 != 0 || w % 8 != 0 || h < min || w < min {
            return Err(Error::invalid(format!(
                "spatial extents {h}x{w} must be multiples of 8 and at least {min}x{min}; \
                 reflect-pad the input up to the next valid size and crop the output"
            )));
        }

        let mut trace: Vec<(String, Vec<usize>)> = Vec::new();
        let mut record = |tape: &Tape, stage: &str, v: Var| {
            if opts.trace {
                trace.push((stage.to_string(), tape.shape(v).to_vec()));
            }
        };

        let mut x = self.in_conv.forward(fw, image)?;
        record(fw.tape, "embed", x);

        let mut skips: Vec<Var> = Vec::new();
        for (level, blocks) in self.encoders.iter().enumerate() {
            for block in blocks {
                x = block.forward(fw, x, &self.bank)?;
            }
            record(fw.tape, &format!("encoder{level}"), x);
            skips.push(x);
            let un = fw.tape.pixel_unshuffle(x, 2)?;
            x = self.downs[level].forward(fw, un)?;
            record(fw.tape, &format!("down{level}"), x);
        }

        for block in &self.latent {
            x = block.forward(fw, x, &self.bank)?;
        }
        record(fw.tape, "latent", x);

        for (i, level) in (0..3).rev().enumerate() {
            let up = self.ups[i].forward(fw, x)?;
            x = fw.tape.pixel_shuffle(up, 2)?;
            record(fw.tape, &format!("up{level}"), x);
            let mut skip = skips[level];
            if opts.ablate_skips[level] {
                skip = fw.tape.scale(skip, 0.0)?;
            }
            let cat = fw.tape.concat(&[x, skip], 1)?;
            x = self.fuses[i].forward(fw, cat)?;
            for block in &self.decoders[i] {
                x = block.forward(fw, x, &self.bank)?;
            }
            record(fw.tape, &format!("decoder{level}"), x);
        }

        let residual = self.out_conv.forward(fw, x)?;
        let output = fw.tape.add(image, residual)?;
        record(fw.tape, "output", output);
        Ok(ForwardRun { output, trace })
    }

    /// Exact number of scalar learnable parameters.
    pub fn param_count(&self) -> usize {
        self.store.total_scalars()
    }

    /// Scalar counts grouped by top-level component, in declaration order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, value) in self.store.iter() {
            let group = name.split('.').next().unwrap_or(name).to_string();
            match groups.last_mut() {
                Some((g, n)) if *g == group => *n += value.numel(),
                _ => groups.push((group, value.numel())),
            }
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&mut rng, vec![1, 3, h, w], 0.0, 1.0)
    }

    #[test]
    fn toy_build_and_forward_is_quick_and_shape_preserving() {
        let started = std::time::Instant::now();
        let model = GabformerModel::build(GabformerConfig::toy(), 42).unwrap();
        let mut tape = Tape::new();
        let mut fw = Forward::inference(&mut tape, &model.store);
        let img = rand_image(1, 64, 64);
        let x = fw.tape.constant(&img);
        let y = model.forward(&mut fw, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 64, 64]);
        assert!(
            started.elapsed().as_secs() < 30,
            "toy forward took {:?}",
            started.elapsed()
        );
    }

    #[test]
    fn zero_final_conv_makes_identity_at_init() {
        let model = GabformerModel::build(GabformerConfig::toy(), 7).unwrap();
        let mut tape = Tape::new();
        let mut fw = Forward::inference(&mut tape, &model.store);
        let img = rand_image(2, 32, 32);
        let x = fw.tape.constant(&img);
        let y = model.forward(&mut fw, x).unwrap();
        assert_eq!(tape.data(y), img.data());
    }

    #[test]
    fn equal_seeds_build_identical_parameters() {
        let a = GabformerModel::build(GabformerConfig::toy(), 5).unwrap();
        let b = GabformerModel::build(GabformerConfig::toy(), 5).unwrap();
        for (ia, ib) in a.store.ids().zip(b.store.ids()) {
            assert_eq!(a.store.value(ia), b.store.value(ib));
        }
        let c = GabformerModel::build(GabformerConfig::toy(), 6).unwrap();
        assert_eq!(a.param_count(), c.param_count());
        // Different seed, different weights.
        let wa = a.store.find("encoder0.block0.mgsa.q.conv_in.weight").unwrap();
        let wc = c.store.find("encoder0.block0.mgsa.q.conv_in.weight").unwrap();
        assert_ne!(a.store.value(wa), c.store.value(wc));
    }

    #[test]
    fn encoder_trace_follows_the_level_schedule() {
        let model = GabformerModel::build(GabformerConfig::toy(), 3).unwrap();
        let mut tape = Tape::new();
        let mut fw = Forward::inference(&mut tape, &model.store);
        let x = fw.tape.constant(&rand_image(3, 64, 32));
        let run = model
            .forward_opts(
                &mut fw,
                x,
                &ForwardOptions {
                    trace: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let c0 = model.config.base_channels;
        for k in 0..3 {
            let (stage, shape) = run
                .trace
                .iter()
                .find(|(s, _)| s == &format!("encoder{k}"))
                .unwrap();
            assert_eq!(
                shape,
                &vec![1, c0 << k, 64 >> k, 32 >> k],
                "stage {stage}"
            );
        }
        let (_, latent) = run.trace.iter().find(|(s, _)| s == "latent").unwrap();
        assert_eq!(latent, &vec![1, c0 * 8, 8, 4]);
    }

    #[test]
    fn indivisible_input_is_rejected_with_padding_hint() {
        let model = GabformerModel::build(GabformerConfig::toy(), 3).unwrap();
        let mut tape = Tape::new();
        let mut fw = Forward::inference(&mut tape, &model.store);
        let x = fw.tape.constant(&rand_image(4, 60, 64));
        let err = model.forward(&mut fw, x).unwrap_err().to_string();
        assert!(err.contains("pad"), "unhelpful error: {err}");
    }

    #[test]
    fn ablating_any_skip_changes_the_output() {
        let mut cfg = GabformerConfig::toy();
        cfg.final_conv_zero_init = false; // identity init would hide the skips
        let model = GabformerModel::build(cfg, 11).unwrap();
        let img = rand_image(5, 32, 32);
        let mut base_tape = Tape::new();
        let mut fw = Forward::inference(&mut base_tape, &model.store);
        let x = fw.tape.constant(&img);
        let base_out = model.forward(&mut fw, x).unwrap();
        let base = fw.tape.value(base_out);
        for k in 0..3 {
            let mut tape = Tape::new();
            let mut fw = Forward::inference(&mut tape, &model.store);
            let x = fw.tape.constant(&img);
            let mut opts = ForwardOptions::default();
            opts.ablate_skips[k] = true;
            let out = model.forward_opts(&mut fw, x, &opts).unwrap().output;
            let ablated = fw.tape.value(out);
            assert!(
                base.max_abs_diff(&ablated).unwrap() > 0.0,
                "skip {k} is not wired into the output"
            );
        }
    }

    #[test]
    fn plain_ffn_variant_counts_fewer_parameters() {
        let gffn = GabformerModel::build(GabformerConfig::toy(), 1).unwrap();
        let mut cfg = GabformerConfig::toy();
        cfg.variant = AttentionVariant::gabor_q_plain_ffn();
        let plain = GabformerModel::build(cfg, 1).unwrap();
        assert!(plain.param_count() < gffn.param_count());
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = GabformerConfig::full();
        cfg.variant = AttentionVariant::gabor_qkv_relu();
        cfg.epsilon = 2.5;
        let text = cfg.to_text();
        let back = GabformerConfig::from_text(&text).unwrap();
        assert_eq!(back.base_channels, cfg.base_channels);
        assert_eq!(back.block_counts, cfg.block_counts);
        assert_eq!(back.variant, cfg.variant);
        assert_eq!(back.epsilon, cfg.epsilon);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = GabformerConfig::toy();
        cfg.head_counts = [3, 2, 4, 8]; // 8 % 3 != 0
        assert!(GabformerModel::build(cfg, 0).is_err());
        let mut cfg = GabformerConfig::toy();
        cfg.gabor_ksize = 6;
        assert!(GabformerModel::build(cfg, 0).is_err());
    }
}
