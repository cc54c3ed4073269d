//! Two-stage target speaker extraction network.
//!
//! Stage one is a U-Net style encoder/decoder with a transformer bottleneck.
//! The same encoder embeds the enrollment reference (Siamese weights); its
//! frame average multiplies every mixture frame at the bottleneck. Stage one
//! is applied `n_iterations` times, each pass consuming the previous
//! estimate. Stage two has its own weights, takes the final stage-one
//! estimate and reuses the stage-one reference embedding to dereverberate.

mod checkpoint;
mod layers;

use std::time::Instant;

use ndarray::{Array1, Array3, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Graph, Mode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::{from_ri, istft, stft, to_ri, RiFeature, StftConfig, Waveform};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use layers::{positional_encoding, ConvBlock, Ctx, Linear, TransformerLayer};

/// Frames the encoder needs before it will run.
pub const MIN_FRAMES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stft: StftConfig,
    /// Output channels of each encoder convolution.
    pub conv_channels: Vec<usize>,
    pub kernel: (usize, usize),
    /// Stride along frequency; time stride is always 1.
    pub freq_stride: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_transformer_layers: usize,
    pub dec_transformer_layers: usize,
    /// Heads of the final transformer layer, which runs on the `2K` RI
    /// values of each frame.
    pub final_heads: usize,
    pub final_ff_dim: usize,
    pub n_iterations: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            conv_channels: vec![32, 64, 64, 128],
            kernel: (3, 3),
            freq_stride: 2,
            embed_dim: 256,
            heads: 4,
            ff_dim: 1024,
            enc_transformer_layers: 1,
            dec_transformer_layers: 6,
            final_heads: 6,
            final_ff_dim: 1032,
            n_iterations: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow variant that trains on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            conv_channels: vec![8, 16, 16, 32],
            embed_dim: 64,
            ff_dim: 128,
            final_heads: 2,
            final_ff_dim: 64,
            ..Self::default()
        }
    }

    /// Smallest useful configuration, for gradient checks and fast tests.
    pub fn micro() -> Self {
        Self {
            stft: StftConfig::new(32, 16).expect("valid stft"),
            conv_channels: vec![2, 3],
            embed_dim: 8,
            heads: 2,
            ff_dim: 8,
            enc_transformer_layers: 1,
            dec_transformer_layers: 1,
            final_heads: 2,
            final_ff_dim: 8,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (expected default, desk or micro)"
            ))),
        }
    }

    fn spec(&self) -> Conv2dSpec {
        let (kt, kf) = self.kernel;
        Conv2dSpec::new(self.kernel, (1, self.freq_stride), (kt / 2, kf / 2))
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }

    /// Frequency size after each encoder layer, starting with the input bins.
    pub fn freq_sizes(&self) -> Vec<usize> {
        let spec = self.spec();
        let mut f = vec![self.n_bins()];
        for _ in &self.conv_channels {
            let last = *f.last().unwrap();
            f.push(spec.conv_out(MIN_FRAMES, last).1);
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_iterations == 0 {
            return bad("n_iterations must be at least 1".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be a non-empty list of positive counts".into());
        }
        if self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2) {
            return bad("kernel sizes must be odd so the frame count is preserved".into());
        }
        if self.freq_stride == 0 {
            return bad("freq_stride must be positive".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        let width = 2 * self.n_bins();
        if self.final_heads == 0 || !width.is_multiple_of(self.final_heads) {
            return bad(format!("final width {width} is not divisible by {} heads", self.final_heads));
        }
        if self.ff_dim == 0 || self.final_ff_dim == 0 {
            return bad("feed-forward widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        let spec = self.spec();
        let f = self.freq_sizes();
        for w in f.windows(2) {
            if w[1] == 0 || spec.transpose_out(MIN_FRAMES, w[1]).1 != w[0] {
                return bad(format!(
                    "frequency sizes {f:?} cannot be mirrored by the decoder; choose an stft size with 2^n + 1 bins"
                ));
            }
        }
        Ok(())
    }
}

/// Which sub-network to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone)]
struct StageParams {
    enc: Vec<ConvBlock>,
    enc_fc: Linear,
    enc_tf: Vec<TransformerLayer>,
    dec_tf: Vec<TransformerLayer>,
    dec_fc: Linear,
    /// Ordered from the deepest level back to the input resolution.
    dec: Vec<ConvBlock>,
    final_tf: TransformerLayer,
    out: Linear,
}

impl StageParams {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig, prefix: &str) -> Self {
        let spec = cfg.spec();
        let f = cfg.freq_sizes();
        let ch = &cfg.conv_channels;
        let depth = ch.len();
        let mut enc = Vec::with_capacity(depth);
        let mut cin = 2;
        for (l, &c) in ch.iter().enumerate() {
            enc.push(ConvBlock::new(store, rng, &format!("{prefix}.enc{l}"), cin, c, spec, false, Some(cfg.bn_eps)));
            cin = c;
        }
        let flat = ch[depth - 1] * f[depth];
        let e = cfg.embed_dim;
        let enc_fc = Linear::new(store, rng, &format!("{prefix}.enc_fc"), flat, e);
        let enc_tf = (0..cfg.enc_transformer_layers)
            .map(|i| TransformerLayer::new(store, rng, &format!("{prefix}.enc_tf{i}"), e, cfg.heads, cfg.ff_dim, cfg.ln_eps))
            .collect();
        let dec_tf = (0..cfg.dec_transformer_layers)
            .map(|i| TransformerLayer::new(store, rng, &format!("{prefix}.dec_tf{i}"), e, cfg.heads, cfg.ff_dim, cfg.ln_eps))
            .collect();
        let dec_fc = Linear::new(store, rng, &format!("{prefix}.dec_fc"), e, flat);
        let mut dec = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let (cout, bn) = if l == 0 { (2, None) } else { (ch[l - 1], Some(cfg.bn_eps)) };
            dec.push(ConvBlock::new(store, rng, &format!("{prefix}.dec{l}"), 2 * ch[l], cout, spec, true, bn));
        }
        let width = 2 * cfg.n_bins();
        let final_tf = TransformerLayer::new(
            store,
            rng,
            &format!("{prefix}.final_tf"),
            width,
            cfg.final_heads,
            cfg.final_ff_dim,
            cfg.ln_eps,
        );
        // Identity start: the spectrum assembled by the decoder passes through
        // unchanged until training shapes it. A random square map scrambles
        // bins and takes hundreds of steps to undo.
        let out = Linear::identity(store, &format!("{prefix}.out"), width);
        Self {
            enc,
            enc_fc,
            enc_tf,
            dec_tf,
            dec_fc,
            dec,
            final_tf,
            out,
        }
    }
}

/// Encoder output: one embedding per frame plus the activations of every
/// convolution layer for the decoder's skip connections.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[B, N, embed_dim]`.
    pub frames: Var,
    pub skips: Vec<Var>,
}

/// Graph handles produced by a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Stage-one estimates, one per iteration, each `[B, 2, N, K]`.
    pub stage1: Vec<Var>,
    /// Stage-two estimate `[B, 2, N, K]`.
    pub stage2: Var,
    /// Frame-averaged reference embedding `[B, embed_dim]`.
    pub ref_embedding: Var,
}

/// Frame-averaged reference embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RefEmbedding {
    pub vector: Array1<f64>,
}

/// Result of running the model on one mixture.
#[derive(Debug, Clone)]
pub struct ExtractionOutput {
    pub stage1_outputs: Vec<RiFeature>,
    pub stage2_output: RiFeature,
    pub ref_embedding: RefEmbedding,
}

impl ExtractionOutput {
    /// Final stage-one estimate of the reverberant desired signal.
    pub fn stage1_waveform(&self) -> Result<Waveform> {
        istft(&from_ri(self.stage1_outputs.last().expect("at least one iteration"))?)
    }

    /// Stage-two estimate of the dry desired signal.
    pub fn stage2_waveform(&self) -> Result<Waveform> {
        istft(&from_ri(&self.stage2_output)?)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    stage1: StageParams,
    stage2: StageParams,
}

/// Small floor inside the input RMS normalization.
const NORM_EPS: f64 = 1e-8;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let stage1 = StageParams::new(&mut store, &mut rng, &config, "stage1");
        let stage2 = StageParams::new(&mut store, &mut rng, &config, "stage2");
        Ok(Self {
            config,
            store,
            stage1,
            stage2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn stage(&self, stage: Stage) -> &StageParams {
        match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        }
    }

    fn cx<'a>(&'a self, g: &'a Graph) -> Ctx<'a> {
        Ctx { g, store: &self.store }
    }

    fn check_input(&self, g: &Graph, x: Var, what: &str) -> Result<(usize, usize)> {
        let sh = g.shape(x);
        let k = self.config.n_bins();
        if sh.len() != 4 || sh[1] != 2 || sh[3] != k {
            return Err(Error::invalid(format!(
                "{what} must be shaped [batch, 2, frames, {k}], got {sh:?}"
            )));
        }
        if sh[0] == 0 {
            return Err(Error::invalid(format!("{what} batch is empty")));
        }
        if sh[2] < MIN_FRAMES {
            return Err(Error::invalid(format!(
                "{what} has {} frames, at least {MIN_FRAMES} are needed",
                sh[2]
            )));
        }
        Ok((sh[0], sh[2]))
    }

    /// Runs an encoder on RI features `[B, 2, N, K]`. The input is scaled to
    /// unit RMS per item first.
    pub fn encode(&self, g: &Graph, stage: Stage, x: Var) -> Result<Encoded> {
        let (b, n) = self.check_input(g, x, "encoder input")?;
        let p = self.stage(stage);
        let cx = self.cx(g);
        let mut h = g.rms_normalize(x, NORM_EPS);
        let mut skips = Vec::with_capacity(p.enc.len());
        for block in &p.enc {
            h = block.forward(cx, h);
            skips.push(h);
        }
        let sh = g.shape(h);
        let h = g.permute(h, &[0, 2, 1, 3]);
        let h = g.reshape(h, &[b, n, sh[1] * sh[3]]);
        let h = p.enc_fc.forward(cx, h);
        let pe = self.positions(g, n);
        let mut h = g.add(h, pe);
        for layer in &p.enc_tf {
            h = layer.forward(cx, h);
        }
        Ok(Encoded { frames: h, skips })
    }

    fn positions(&self, g: &Graph, n: usize) -> Var {
        let e = self.config.embed_dim;
        let pe = positional_encoding(n, e).into_shape_with_order(IxDyn(&[1, n, e])).unwrap();
        g.constant(pe)
    }

    /// Stage-one encoding of a reference `[B, 2, N_ref, K]`, averaged over
    /// frames to `[B, embed_dim]`.
    pub fn embed_reference(&self, g: &Graph, reference: Var) -> Result<Var> {
        let enc = self.encode(g, Stage::One, reference)?;
        Ok(average_frames(g, enc.frames))
    }

    /// Multiplies every frame `[B, N, E]` by the reference embedding `[B, E]`.
    pub fn fuse(&self, g: &Graph, frames: Var, reference: Var) -> Result<Var> {
        let fs = g.shape(frames);
        let rs = g.shape(reference);
        if fs.len() != 3 || rs.len() != 2 || fs[0] != rs[0] || fs[2] != rs[1] {
            return Err(Error::invalid(format!(
                "cannot fuse frames {fs:?} with reference embedding {rs:?}"
            )));
        }
        let r = g.reshape(reference, &[rs[0], 1, rs[1]]);
        Ok(g.mul(frames, r))
    }

    /// Decoder: transformer stack, projection back to the deepest feature
    /// map, transposed convolutions with mixture skips, then the final
    /// transformer and a linear map to RI values `[B, 2, N, K]`.
    pub fn decode(&self, g: &Graph, stage: Stage, fused: Var, skips: &[Var]) -> Result<Var> {
        let p = self.stage(stage);
        let cx = self.cx(g);
        let ch = &self.config.conv_channels;
        let f = self.config.freq_sizes();
        let depth = ch.len();
        let fs = g.shape(fused);
        if fs.len() != 3 || fs[2] != self.config.embed_dim || skips.len() != depth {
            return Err(Error::invalid(format!(
                "decoder got frames {fs:?} and {} skips, expected width {} and {depth} skips",
                skips.len(),
                self.config.embed_dim
            )));
        }
        let (b, n) = (fs[0], fs[1]);
        for (l, &s) in skips.iter().enumerate() {
            let want = [b, ch[l], n, f[l + 1]];
            if g.shape(s) != want {
                return Err(Error::invalid(format!(
                    "skip {l} has shape {:?}, expected {want:?}",
                    g.shape(s)
                )));
            }
        }
        let mut h = fused;
        for layer in &p.dec_tf {
            h = layer.forward(cx, h);
        }
        let h = p.dec_fc.forward(cx, h);
        let h = g.reshape(h, &[b, n, ch[depth - 1], f[depth]]);
        let mut h = g.permute(h, &[0, 2, 1, 3]);
        for (block, &skip) in p.dec.iter().zip(skips.iter().rev()) {
            let cat = g.concat(&[h, skip], 1);
            h = block.forward(cx, cat);
        }
        let k = self.config.n_bins();
        let h = g.permute(h, &[0, 2, 1, 3]);
        let h = g.reshape(h, &[b, n, 2 * k]);
        let h = p.final_tf.forward(cx, h);
        let h = p.out.forward(cx, h);
        let h = g.reshape(h, &[b, n, 2, k]);
        Ok(g.permute(h, &[0, 2, 1, 3]))
    }

    fn run_stage(&self, g: &Graph, stage: Stage, input: Var, ref_embedding: Var) -> Result<Var> {
        let enc = self.encode(g, stage, input)?;
        let fused = self.fuse(g, enc.frames, ref_embedding)?;
        self.decode(g, stage, fused, &enc.skips)
    }

    /// Applies stage one `iterations` times; iteration 0 reads the mixture and
    /// every later one the previous estimate. The reference is embedded once.
    pub fn stage1_iterate(&self, g: &Graph, mixture: Var, reference: Var, iterations: usize) -> Result<(Vec<Var>, Var)> {
        if iterations == 0 {
            return Err(Error::invalid("at least one stage-one iteration is required"));
        }
        let ref_embedding = self.embed_reference(g, reference)?;
        let mut estimates = Vec::with_capacity(iterations);
        let mut input = mixture;
        for _ in 0..iterations {
            let est = self.run_stage(g, Stage::One, input, ref_embedding)?;
            estimates.push(est);
            input = est;
        }
        Ok((estimates, ref_embedding))
    }

    /// Stage two on the final stage-one estimate, conditioned on the
    /// stage-one reference embedding.
    pub fn stage2_dereverb(&self, g: &Graph, stage1_out: Var, ref_embedding: Var) -> Result<Var> {
        self.run_stage(g, Stage::Two, stage1_out, ref_embedding)
    }

    /// Full forward pass with the configured number of iterations.
    pub fn forward(&self, g: &Graph, mixture: Var, reference: Var) -> Result<ForwardVars> {
        self.forward_with(g, mixture, reference, self.config.n_iterations)
    }

    pub fn forward_with(&self, g: &Graph, mixture: Var, reference: Var, iterations: usize) -> Result<ForwardVars> {
        let (stage1, ref_embedding) = self.stage1_iterate(g, mixture, reference, iterations)?;
        let stage2 = self.stage2_dereverb(g, *stage1.last().unwrap(), ref_embedding)?;
        Ok(ForwardVars {
            stage1,
            stage2,
            ref_embedding,
        })
    }

    /// Stage-one encoder embedding of an estimate, averaged over frames.
    /// Used as the triplet anchor.
    pub fn anchor_embedding(&self, g: &Graph, estimate: Var) -> Result<Var> {
        self.embed_reference(g, estimate)
    }

    /// Inference on one mixture and one enrollment reference.
    pub fn extract(&self, mixture: &Waveform, reference: &Waveform) -> Result<ExtractionOutput> {
        let cfg = &self.config.stft;
        if mixture.sample_rate() != reference.sample_rate() {
            return Err(Error::SampleRate {
                found: reference.sample_rate(),
                expected: mixture.sample_rate(),
            });
        }
        let mix = to_ri(&stft(mixture, cfg)?);
        let reference = to_ri(&stft(reference, cfg)?);
        let g = Graph::new(Mode::Eval);
        let x = g.input(batch_of_one(&mix));
        let r = g.input(batch_of_one(&reference));
        let out = self.forward(&g, x, r)?;
        let wrap = |v: Var| -> RiFeature {
            let t = g.value(v);
            let planes = t
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("rank 4 output");
            RiFeature {
                planes,
                config: mix.config,
                signal_len: mix.signal_len,
                sample_rate: mix.sample_rate,
            }
        };
        let emb = g.value(out.ref_embedding);
        let vector = emb.index_axis(Axis(0), 0).iter().copied().collect();
        let output = ExtractionOutput {
            stage1_outputs: out.stage1.iter().map(|&v| wrap(v)).collect(),
            stage2_output: wrap(out.stage2),
            ref_embedding: RefEmbedding { vector },
        };
        for f in output.stage1_outputs.iter().chain([&output.stage2_output]) {
            if f.planes.iter().any(|v| !v.is_finite()) {
                return Err(Error::Measurement("model produced non-finite output".into()));
            }
        }
        Ok(output)
    }

    /// [`Model::extract`] plus wall-clock seconds spent.
    pub fn extract_timed(&self, mixture: &Waveform, reference: &Waveform) -> Result<(ExtractionOutput, f64)> {
        let t0 = Instant::now();
        let out = self.extract(mixture, reference)?;
        Ok((out, t0.elapsed().as_secs_f64()))
    }
}

/// Mean over the frame axis of `[B, N, E]`.
pub fn average_frames(g: &Graph, frames: Var) -> Var {
    g.mean_axis(frames, 1)
}

/// Stacks RI features `[2, N, K]` of equal shape into a batch `[B, 2, N, K]`.
pub fn stack_features(features: &[&Array3<f64>]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty list of features"))?;
    let dim = first.dim();
    if let Some(bad) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::invalid(format!(
            "feature shapes differ: {:?} vs {:?}",
            dim,
            bad.dim()
        )));
    }
    let views: Vec<_> = features.iter().map(|f| f.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).unwrap().into_dyn())
}

fn batch_of_one(f: &RiFeature) -> Tensor {
    f.planes.clone().insert_axis(Axis(0)).into_dyn()
}
