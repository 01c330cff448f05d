//! Convolutional VQ-VAE that turns pianorolls into codebook index sequences.
//!
//! The encoder treats the 128 pitches as channels and convolves over time,
//! halving the frame rate `log2(D)` times; the decoder mirrors it with
//! transposed convolutions. Quantization picks the nearest codebook row.
//! Decoder logits are layer-normalized across pitches in every frame, then
//! scaled and shifted per pitch; the shift starts at [`OFF_LOGIT`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::music::{Corpus, Pianoroll, PITCHES};
use crate::numerics::{
    AdamW, AdamWConfig, Bound, DivergenceGuard, Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS,
};

/// Initial per-pitch output shift. Pianoroll cells are overwhelmingly off, and
/// the L1 gradient has the same magnitude for every cell, so a decoder that
/// starts undecided spends its updates silencing everything before it learns
/// which cells are on.
pub const OFF_LOGIT: f64 = -4.0;

/// A music piece as codebook indices; index `K` is the MASK token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub style: Option<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, style: Option<usize>) -> Self {
        Self { tokens, style }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks every token is `<= mask` (MASK allowed).
    pub fn check_range(&self, mask: usize) -> Result<()> {
        match self.tokens.iter().position(|&t| t > mask) {
            Some(position) => Err(Error::TokenRange {
                token: self.tokens[position],
                position,
                mask,
            }),
            None => Ok(()),
        }
    }

    /// Checks every token is an ordinary codebook index (`< mask`).
    pub fn check_clean(&self, mask: usize) -> Result<()> {
        self.check_range(mask)?;
        match self.tokens.iter().position(|&t| t == mask) {
            Some(p) => Err(Error::MaskToken(p)),
            None => Ok(()),
        }
    }
}

/// Borrowed view of a `K x d` codebook.
#[derive(Clone, Copy, Debug)]
pub struct Codebook<'a> {
    entries: &'a [f64],
    dim: usize,
}

impl<'a> Codebook<'a> {
    pub fn new(entries: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !entries.len().is_multiple_of(dim) || entries.len() / dim < 2 {
            return Err(Error::Config(format!(
                "codebook of {} values with dim {dim} needs K >= 2",
                entries.len()
            )));
        }
        Ok(Self { entries, dim })
    }

    pub fn size(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, k: usize) -> &'a [f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Nearest entry by squared Euclidean distance, lowest index on ties.
    pub fn quantize(&self, z: &[f64]) -> (usize, &'a [f64]) {
        debug_assert_eq!(z.len(), self.dim);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self
                .entry(k)
                .iter()
                .zip(z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        (best, self.entry(best))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqVaeConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Time downsampling factor; a power of two.
    pub downsample: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            codebook_size: 32,
            code_dim: 16,
            downsample: 4,
            hidden: 32,
            kernel: 4,
            beta: 0.25,
        }
    }
}

impl VqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook size K must be >= 2".into()));
        }
        if self.code_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("code_dim and hidden must be positive".into()));
        }
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample {} must be a power of two",
                self.downsample
            )));
        }
        if self.kernel < 2 || !self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be even and >= 2", self.kernel)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        Ok(())
    }

    pub fn mask_token(&self) -> usize {
        self.codebook_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    transposed: bool,
    relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqVae {
    config: VqVaeConfig,
    params: ParamStore,
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    out_gain: ParamId,
    out_bias: ParamId,
    codebook: ParamId,
}

/// The three VQ-VAE loss terms as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct VqLossTerms {
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
}

/// `|x - x~|_1 + |sg[z] - z_q|^2 + beta |sg[z_q] - z|^2`.
///
/// Only the codebook term reaches `z_q`, only the commitment term reaches `z`;
/// reconstruction gradients reach `z` through the straight-through path that
/// produced `x_tilde`.
pub fn vqvae_loss(
    g: &mut Graph,
    x: Var,
    x_tilde: Var,
    z: Var,
    z_q: Var,
    beta: f64,
) -> Result<VqLossTerms> {
    let diff = g.sub(x, x_tilde)?;
    let abs = g.abs(diff)?;
    let reconstruction = g.sum(abs)?;

    let z_sg = g.detach(z);
    let d2 = g.sub(z_sg, z_q)?;
    let sq2 = g.mul(d2, d2)?;
    let codebook = g.sum(sq2)?;

    let zq_sg = g.detach(z_q);
    let d3 = g.sub(zq_sg, z)?;
    let sq3 = g.mul(d3, d3)?;
    let s3 = g.sum(sq3)?;
    let commitment = g.scale(s3, beta)?;

    let partial = g.add(reconstruction, codebook)?;
    let total = g.add(partial, commitment)?;
    Ok(VqLossTerms {
        reconstruction,
        codebook,
        commitment,
        total,
    })
}

/// Stacks rolls into a `[batch, 128, frames]` tensor.
pub fn batch_tensor(rolls: &[&Pianoroll]) -> Result<Tensor> {
    let frames = rolls.first().map(|r| r.frames()).unwrap_or(0);
    let mut data = Vec::with_capacity(rolls.len() * PITCHES * frames);
    for r in rolls {
        if r.frames() != frames {
            return Err(Error::Shape("rolls in a batch must share a frame count".into()));
        }
        data.extend(r.to_f64());
    }
    Tensor::new(vec![rolls.len(), PITCHES, frames], data)
}

/// Forward pieces of one training step.
#[derive(Clone, Debug)]
pub struct VqForward {
    /// Encoder output, `[batch * L, d]`.
    pub z: Var,
    /// Selected codebook rows, `[batch * L, d]`.
    pub z_q: Var,
    pub indices: Vec<usize>,
    /// Decoder logits, `[batch, 128, F]`.
    pub logits: Var,
    pub terms: VqLossTerms,
}

impl VqVae {
    pub fn new<R: Rng + ?Sized>(config: VqVaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (h, k) = (config.hidden, config.kernel);
        let pad = (k - 2) / 2;
        let stages = config.downsample.trailing_zeros() as usize;

        let mut conv = |params: &mut ParamStore, name: &str, cin: usize, cout: usize, kk: usize, transposed: bool| {
            let fan_in = (cin * kk) as f64;
            let shape = if transposed { [cin, cout, kk] } else { [cout, cin, kk] };
            let w = params.add(
                &format!("{name}.weight"),
                Tensor::randn(shape, libm::sqrt(2.0 / fan_in), rng),
            );
            let b = params.add(&format!("{name}.bias"), Tensor::zeros([cout]));
            (w, b)
        };

        let mut encoder = Vec::new();
        if stages == 0 {
            let (w, b) = conv(&mut params, "encoder.0", PITCHES, h, 3, false);
            encoder.push(ConvLayer { w, b, stride: 1, pad: 1, transposed: false, relu: true });
        }
        for s in 0..stages {
            let cin = if s == 0 { PITCHES } else { h };
            let (w, b) = conv(&mut params, &format!("encoder.{s}"), cin, h, k, false);
            encoder.push(ConvLayer { w, b, stride: 2, pad, transposed: false, relu: true });
        }
        let (w, b) = conv(&mut params, "encoder.proj", h, config.code_dim, 1, false);
        encoder.push(ConvLayer { w, b, stride: 1, pad: 0, transposed: false, relu: false });

        let mut decoder = Vec::new();
        let (w, b) = conv(&mut params, "decoder.proj", config.code_dim, h, 1, false);
        decoder.push(ConvLayer { w, b, stride: 1, pad: 0, transposed: false, relu: true });
        if stages == 0 {
            let (w, b) = conv(&mut params, "decoder.0", h, PITCHES, 3, false);
            decoder.push(ConvLayer { w, b, stride: 1, pad: 1, transposed: false, relu: false });
        }
        for s in 0..stages {
            let last = s + 1 == stages;
            let cout = if last { PITCHES } else { h };
            let (w, b) = conv(&mut params, &format!("decoder.{s}"), h, cout, k, true);
            decoder.push(ConvLayer { w, b, stride: 2, pad, transposed: true, relu: !last });
        }

        let out_gain = params.add("decoder.norm.gain", Tensor::full([PITCHES], 1.0));
        let out_bias = params.add("decoder.norm.bias", Tensor::full([PITCHES], OFF_LOGIT));

        let kk = config.codebook_size as f64;
        let codebook = params.add(
            "codebook",
            Tensor::uniform([config.codebook_size, config.code_dim], -1.0 / kk, 1.0 / kk, rng),
        );
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            out_gain,
            out_bias,
            codebook,
        })
    }

    pub fn config(&self) -> &VqVaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook_param(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> Codebook<'_> {
        Codebook::new(self.params.get(self.codebook).data(), self.config.code_dim)
            .expect("validated codebook")
    }

    pub fn mask_token(&self) -> usize {
        self.config.mask_token()
    }

    /// Latent length for `frames` input frames.
    pub fn latent_len(&self, frames: usize) -> Result<usize> {
        let d = self.config.downsample;
        if frames == 0 || !frames.is_multiple_of(d) {
            let pad = (d - frames % d) % d;
            return Err(Error::Indivisible {
                frames,
                factor: d,
                pad: if frames == 0 { d } else { pad },
            });
        }
        Ok(frames / d)
    }

    fn apply(g: &mut Graph, bound: &Bound, layers: &[ConvLayer], mut h: Var) -> Result<Var> {
        for l in layers {
            let (w, b) = (bound.var(l.w), bound.var(l.b));
            h = if l.transposed {
                g.conv_transpose1d(h, w, b, l.stride, l.pad)?
            } else {
                g.conv1d(h, w, b, l.stride, l.pad)?
            };
            if l.relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Encoder on the tape: `[batch, 128, F] -> [batch * L, d]`.
    pub fn encode_graph(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let l = self.latent_len(s[2])?;
        let h = Self::apply(g, bound, &self.encoder, x)?;
        let p = g.permute(h, &[0, 2, 1])?;
        g.reshape(p, [s[0] * l, self.config.code_dim])
    }

    /// Decoder on the tape: `[batch * L, d] -> [batch, 128, L * D]` logits.
    pub fn decode_graph(&self, g: &mut Graph, bound: &Bound, z: Var, batch: usize) -> Result<Var> {
        let rows = g.shape(z)[0];
        let l = rows / batch.max(1);
        let r = g.reshape(z, [batch, l, self.config.code_dim])?;
        let p = g.permute(r, &[0, 2, 1])?;
        let h = Self::apply(g, bound, &self.decoder, p)?;
        let frames_last = g.permute(h, &[0, 2, 1])?;
        let n = g.layer_norm(frames_last, bound.var(self.out_gain), bound.var(self.out_bias), LAYER_NORM_EPS)?;
        g.permute(n, &[0, 2, 1])
    }

    /// Full straight-through forward pass with the loss terms.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<VqForward> {
        let batch = g.shape(x)[0];
        let z = self.encode_graph(g, bound, x)?;
        let codebook = self.codebook();
        let zv = g.value(z);
        let d = self.config.code_dim;
        let indices: Vec<usize> = (0..zv.shape()[0])
            .map(|i| codebook.quantize(&zv.data()[i * d..(i + 1) * d]).0)
            .collect();
        let z_q = g.gather(bound.var(self.codebook), &indices)?;
        let z_st = g.copy_gradient(z_q, z)?;
        let logits = self.decode_graph(g, bound, z_st, batch)?;
        let x_tilde = g.sigmoid(logits)?;
        let terms = vqvae_loss(g, x, x_tilde, z, z_q, self.config.beta)?;
        Ok(VqForward {
            z,
            z_q,
            indices,
            logits,
            terms,
        })
    }

    /// Continuous latents `[L, d]` for one roll.
    pub fn encode(&self, roll: &Pianoroll) -> Result<Tensor> {
        self.latent_len(roll.frames())?;
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(batch_tensor(&[roll])?);
        let z = self.encode_graph(&mut g, &bound, x)?;
        Ok(g.value(z).clone())
    }

    /// Quantized indices of one roll.
    pub fn tokenize(&self, roll: &Pianoroll, style: Option<usize>) -> Result<TokenSequence> {
        let z = self.encode(roll)?;
        let codebook = self.codebook();
        let d = self.config.code_dim;
        let tokens = (0..z.shape()[0])
            .map(|i| codebook.quantize(&z.data()[i * d..(i + 1) * d]).0)
            .collect();
        Ok(TokenSequence::new(tokens, style))
    }

    /// Reconstruction logits `[128, L * D]`.
    pub fn decode_logits(&self, tokens: &TokenSequence) -> Result<Tensor> {
        tokens.check_clean(self.mask_token())?;
        if tokens.is_empty() {
            return Err(Error::Shape("cannot decode an empty token sequence".into()));
        }
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let z = g.gather(bound.var(self.codebook), &tokens.tokens)?;
        let logits = self.decode_graph(&mut g, &bound, z, 1)?;
        let frames = g.shape(logits)[2];
        g.value(logits).clone().reshape([PITCHES, frames])
    }

    /// Decoded pianoroll, thresholding `sigmoid(logit) > 0.5`.
    pub fn decode(&self, tokens: &TokenSequence, frame_rate: f64) -> Result<Pianoroll> {
        let logits = self.decode_logits(tokens)?;
        let frames = logits.shape()[1];
        let cells = logits.data().iter().map(|&v| v > 0.0).collect();
        Pianoroll::from_cells(frames, frame_rate, cells)
    }

    /// Fraction of cells reproduced by decode(tokenize(roll)).
    pub fn reconstruction_accuracy(&self, rolls: &[&Pianoroll]) -> Result<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for roll in rolls {
            let rec = self.decode(&self.tokenize(roll, None)?, roll.frame_rate())?;
            hits += rec
                .cells()
                .iter()
                .zip(roll.cells())
                .filter(|(a, b)| a == b)
                .count();
            total += roll.cells().len();
        }
        if total == 0 {
            return Err(Error::Degenerate("no cells to score".into()));
        }
        Ok(hits as f64 / total as f64)
    }

    /// Fraction of active cells reproduced by decode(tokenize(roll)); NaN
    /// when the rolls are silent. Cell accuracy alone rewards decoding
    /// silence on sparse rolls.
    pub fn reconstruction_recall(&self, rolls: &[&Pianoroll]) -> Result<f64> {
        let mut hits = 0usize;
        let mut active = 0usize;
        for roll in rolls {
            let rec = self.decode(&self.tokenize(roll, None)?, roll.frame_rate())?;
            for (&a, &b) in rec.cells().iter().zip(roll.cells()) {
                active += usize::from(b);
                hits += usize::from(a && b);
            }
        }
        Ok(if active == 0 { f64::NAN } else { hits as f64 / active as f64 })
    }

    /// How often each codebook index is chosen over a corpus.
    pub fn codebook_usage(&self, corpus: &Corpus) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.config.codebook_size];
        for (roll, _) in corpus.items() {
            for t in self.tokenize(roll, None)?.tokens {
                counts[t] += 1;
            }
        }
        Ok(counts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Codebook rows unused for this many steps are re-seeded.
    pub dead_code_steps: usize,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::desk()
            },
            dead_code_steps: 500,
        }
    }
}

/// Loss per step, averaged over the batch.
pub type LossHistory = Vec<f64>;

/// Trains a freshly initialized model end to end.
pub fn train_vqvae<R: Rng + ?Sized>(
    corpus: &Corpus,
    model_config: VqVaeConfig,
    train: &VqTrainConfig,
    rng: &mut R,
) -> Result<(VqVae, LossHistory)> {
    let mut model = VqVae::new(model_config, rng)?;
    seed_codebook(&mut model, corpus, train.batch_size, rng)?;
    continue_training(model, corpus, train, rng)
}

/// Replaces the codebook with encoder outputs of one random batch, so every
/// entry starts on the data manifold instead of near the origin.
fn seed_codebook<R: Rng + ?Sized>(model: &mut VqVae, corpus: &Corpus, batch_size: usize, rng: &mut R) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot train on an empty corpus".into()));
    }
    let k = model.config.codebook_size;
    let d = model.config.code_dim;
    let per_roll = model.latent_len(corpus.segment_frames().unwrap_or(0))?;
    let rolls_needed = k.div_ceil(per_roll).max(batch_size.max(1));
    let batch: Vec<&Pianoroll> = (0..rolls_needed)
        .map(|_| &corpus.items()[rng.random_range(0..corpus.len())].0)
        .collect();
    let mut g = Graph::new();
    let bound = model.params.bind_frozen(&mut g);
    let x = g.constant(batch_tensor(&batch)?);
    let z = model.encode_graph(&mut g, &bound, x)?;
    let z = g.value(z);
    let rows = z.shape()[0];
    let mut order: Vec<usize> = (0..rows).collect();
    for i in 0..k.min(rows) {
        let j = rng.random_range(i..rows);
        order.swap(i, j);
    }
    let cb = model.params.get_mut(model.codebook);
    for (entry, &row) in order.iter().take(k).enumerate() {
        cb.data_mut()[entry * d..(entry + 1) * d].copy_from_slice(&z.data()[row * d..(row + 1) * d]);
    }
    Ok(())
}

/// Runs `train.steps` optimizer steps on an existing model.
pub fn continue_training<R: Rng + ?Sized>(
    mut model: VqVae,
    corpus: &Corpus,
    train: &VqTrainConfig,
    rng: &mut R,
) -> Result<(VqVae, LossHistory)> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot train on an empty corpus".into()));
    }
    let frames = corpus.segment_frames().unwrap_or(0);
    model.latent_len(frames)?;
    let mut opt = AdamW::new(train.optimizer, &model.params);
    let k = model.config.codebook_size;
    let d = model.config.code_dim;
    let mut last_used = vec![0usize; k];
    let mut history = Vec::with_capacity(train.steps);
    let mut guard = DivergenceGuard::default();
    let batch_size = train.batch_size.max(1);

    for step in 0..train.steps {
        let batch: Vec<&Pianoroll> = (0..batch_size)
            .map(|_| &corpus.items()[rng.random_range(0..corpus.len())].0)
            .collect();
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let x = g.constant(batch_tensor(&batch)?);
        let fwd = model.forward(&mut g, &bound, x)?;
        let loss = g.scale(fwd.terms.total, 1.0 / batch_size as f64)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grads = bound.grads(&mut grads);
        opt.step(&mut model.params, &grads);
        history.push(value);

        guard.observe(step, value)?;

        for &i in &fwd.indices {
            last_used[i] = step;
        }
        if train.dead_code_steps > 0 {
            let z = g.value(fwd.z);
            let rows = z.shape()[0];
            for (entry, used) in last_used.iter_mut().enumerate() {
                if step - *used >= train.dead_code_steps {
                    let pick = rng.random_range(0..rows);
                    let src = z.data()[pick * d..(pick + 1) * d].to_vec();
                    let cb = model.params.get_mut(model.codebook);
                    cb.data_mut()[entry * d..(entry + 1) * d].copy_from_slice(&src);
                    opt.reset_row(model.codebook.index(), entry, d);
                    *used = step;
                }
            }
        }
    }
    Ok((model, history))
}
