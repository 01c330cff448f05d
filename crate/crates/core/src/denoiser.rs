//! Transformer predicting `p(x~_0 | x_t, y)` for the reverse diffusion process.
//!
//! The timestep and style embeddings are summed into one condition vector,
//! and every layer normalization in the network takes its scale and shift
//! from an affine map of that vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{vlb_loss, NoiseSchedule, X0Predictor, DEFAULT_AUX_WEIGHT};
use crate::error::{Error, Result};
use crate::numerics::{
    softmax_tensor, AdamW, AdamWConfig, Bound, DivergenceGuard, Graph, ParamId, ParamStore, Tensor, Var,
    LAYER_NORM_EPS,
};
use crate::vqvae::{LossHistory, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Ordinary codebook classes `K`; the input vocabulary adds MASK.
    pub classes: usize,
    pub seq_len: usize,
    pub styles: usize,
    /// Largest accepted timestep `T`.
    pub steps: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
}

impl DenoiserConfig {
    pub fn desk(classes: usize, seq_len: usize, styles: usize, steps: usize) -> Self {
        Self {
            classes,
            seq_len,
            styles,
            steps,
            d_model: 64,
            blocks: 2,
            heads: 4,
            ffn_mult: 4,
        }
    }

    /// 16 blocks of width 512.
    pub fn paper(classes: usize, seq_len: usize, styles: usize, steps: usize) -> Self {
        Self {
            d_model: 512,
            blocks: 16,
            heads: 8,
            ..Self::desk(classes, seq_len, styles, steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.seq_len == 0 || self.styles == 0 || self.steps == 0 {
            return Err(Error::Config(format!("degenerate denoiser config {self:?}")));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must be even and divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.blocks == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("need at least one block and a non-empty FFN".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of timestep `t`: sines in the first half, cosines in the second.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::pow(10_000.0, -(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[i] = libm::sin(arg);
        out[half + i] = libm::cos(arg);
    }
    out
}

/// Parameters of one conditional normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaLnParams {
    pub scale_w: ParamId,
    pub scale_b: ParamId,
    pub shift_w: ParamId,
    pub shift_b: ParamId,
}

/// `(cond W_s + b_s) * normalize(h) + (cond W_h + b_h)`.
///
/// `h` is `[B, L, d]` and `cond` is `[B, 1, d]`; the modulation broadcasts over `L`.
pub fn adaln(g: &mut Graph, h: Var, cond: Var, scale_w: Var, scale_b: Var, shift_w: Var, shift_b: Var) -> Result<Var> {
    let norm = g.normalize(h, LAYER_NORM_EPS)?;
    let scale = g.matmul(cond, scale_w)?;
    let scale = g.add(scale, scale_b)?;
    let shift = g.matmul(cond, shift_w)?;
    let shift = g.add(shift, shift_b)?;
    let out = g.mul(norm, scale)?;
    g.add(out, shift)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    norm1: AdaLnParams,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: AdaLnParams,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct DenoiserForward {
    /// `[B * L, K]`.
    pub logits: Var,
    /// Attention probabilities per block, `[B * heads, L, L]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamStore,
    token_embedding: ParamId,
    position_embedding: ParamId,
    style_embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: AdaLnParams,
    head: Linear,
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let mut params = ParamStore::new();
        let token_embedding = params.add("token_embedding", Tensor::randn([config.classes + 1, d], 1.0, rng));
        let position_embedding = params.add("position_embedding", Tensor::randn([config.seq_len, d], 0.1, rng));
        let style_embedding = params.add("style_embedding", Tensor::randn([config.styles, d], 1.0, rng));

        let linear = |params: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R| Linear {
            w: params.add(
                &format!("{name}.weight"),
                Tensor::randn([cin, cout], libm::sqrt(1.0 / cin as f64), rng),
            ),
            b: params.add(&format!("{name}.bias"), Tensor::zeros([cout])),
        };
        let adaln_params = |params: &mut ParamStore, name: &str, rng: &mut R| {
            let std = 0.1 / libm::sqrt(d as f64);
            AdaLnParams {
                scale_w: params.add(&format!("{name}.scale.weight"), Tensor::randn([d, d], std, rng)),
                scale_b: params.add(&format!("{name}.scale.bias"), Tensor::full([d], 1.0)),
                shift_w: params.add(&format!("{name}.shift.weight"), Tensor::randn([d, d], std, rng)),
                shift_b: params.add(&format!("{name}.shift.bias"), Tensor::zeros([d])),
            }
        };

        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let p = format!("block{i}");
            let norm1 = adaln_params(&mut params, &format!("{p}.norm1"), rng);
            let q = linear(&mut params, &format!("{p}.attn.q"), d, d, rng);
            let k = linear(&mut params, &format!("{p}.attn.k"), d, d, rng);
            let v = linear(&mut params, &format!("{p}.attn.v"), d, d, rng);
            let o = linear(&mut params, &format!("{p}.attn.o"), d, d, rng);
            let norm2 = adaln_params(&mut params, &format!("{p}.norm2"), rng);
            let ffn_in = linear(&mut params, &format!("{p}.ffn.in"), d, f, rng);
            let ffn_out = linear(&mut params, &format!("{p}.ffn.out"), f, d, rng);
            blocks.push(Block { norm1, q, k, v, o, norm2, ffn_in, ffn_out });
        }
        let final_norm = adaln_params(&mut params, "final_norm", rng);
        let head = linear(&mut params, "head", d, config.classes, rng);
        Ok(Self {
            config,
            params,
            token_embedding,
            position_embedding,
            style_embedding,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn position_embedding_param(&self) -> ParamId {
        self.position_embedding
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }

    /// Final conditional normalization parameters.
    pub fn final_norm_params(&self) -> AdaLnParams {
        self.final_norm
    }

    fn check_inputs(&self, xt: &[&[usize]], ts: &[usize], styles: &[usize]) -> Result<()> {
        let c = &self.config;
        if xt.is_empty() || ts.len() != xt.len() || styles.len() != xt.len() {
            return Err(Error::Shape(format!(
                "batch of {} sequences with {} timesteps and {} styles",
                xt.len(),
                ts.len(),
                styles.len()
            )));
        }
        for (seq, (&t, &y)) in xt.iter().zip(ts.iter().zip(styles)) {
            if seq.len() != c.seq_len {
                return Err(Error::Shape(format!("sequence length {}, expected {}", seq.len(), c.seq_len)));
            }
            if let Some(position) = seq.iter().position(|&x| x > c.classes) {
                return Err(Error::TokenRange {
                    token: seq[position],
                    position,
                    mask: c.classes,
                });
            }
            if t == 0 || t > c.steps {
                return Err(Error::Timestep { t, max: c.steps });
            }
            if y >= c.styles {
                return Err(Error::Config(format!("style {y} outside 0..{}", c.styles)));
            }
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, bound: &Bound, x: Var, l: Linear) -> Result<Var> {
        let y = g.matmul(x, bound.var(l.w))?;
        g.add(y, bound.var(l.b))
    }

    fn adaln(&self, g: &mut Graph, bound: &Bound, h: Var, cond: Var, p: AdaLnParams) -> Result<Var> {
        adaln(
            g,
            h,
            cond,
            bound.var(p.scale_w),
            bound.var(p.scale_b),
            bound.var(p.shift_w),
            bound.var(p.shift_b),
        )
    }

    /// Splits `[B, L, d]` into `[B * heads, L, d / heads]`.
    fn split_heads(&self, g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
        let (l, h) = (self.config.seq_len, self.config.heads);
        let dh = self.config.d_model / h;
        let x = g.reshape(x, [batch, l, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, [batch * h, l, dh])
    }

    /// Builds the forward pass on `g` with parameters taken from `bound`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        xt: &[&[usize]],
        ts: &[usize],
        styles: &[usize],
    ) -> Result<DenoiserForward> {
        self.check_inputs(xt, ts, styles)?;
        let c = &self.config;
        let (b, l, d) = (xt.len(), c.seq_len, c.d_model);
        let (heads, dh) = (c.heads, d / c.heads);

        let flat: Vec<usize> = xt.iter().flat_map(|s| s.iter().copied()).collect();
        let tok = g.gather(bound.var(self.token_embedding), &flat)?;
        let tok = g.reshape(tok, [b, l, d])?;
        let mut h = g.add(tok, bound.var(self.position_embedding))?;

        let style = g.gather(bound.var(self.style_embedding), styles)?;
        let temb: Vec<f64> = ts.iter().flat_map(|&t| timestep_embedding(t, d)).collect();
        let temb = g.constant(Tensor::new([b, d], temb)?);
        let cond = g.add(style, temb)?;
        let cond = g.reshape(cond, [b, 1, d])?;

        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let a = self.adaln(g, bound, h, cond, blk.norm1)?;
            let q = self.linear(g, bound, a, blk.q)?;
            let k = self.linear(g, bound, a, blk.k)?;
            let v = self.linear(g, bound, a, blk.v)?;
            let q = self.split_heads(g, q, b)?;
            let v = self.split_heads(g, v, b)?;
            let k = g.reshape(k, [b, l, heads, dh])?;
            let kt = g.permute(k, &[0, 2, 3, 1])?;
            let kt = g.reshape(kt, [b * heads, dh, l])?;
            let scores = g.bmm(q, kt)?;
            let scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
            let probs = g.softmax(scores, 2)?;
            attention.push(probs);
            let o = g.bmm(probs, v)?;
            let o = g.reshape(o, [b, heads, l, dh])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, [b, l, d])?;
            let o = self.linear(g, bound, o, blk.o)?;
            h = g.add(h, o)?;

            let f = self.adaln(g, bound, h, cond, blk.norm2)?;
            let f = self.linear(g, bound, f, blk.ffn_in)?;
            let f = g.relu(f)?;
            let f = self.linear(g, bound, f, blk.ffn_out)?;
            h = g.add(h, f)?;
        }
        let h = self.adaln(g, bound, h, cond, self.final_norm)?;
        let logits = self.linear(g, bound, h, self.head)?;
        let logits = g.reshape(logits, [b * l, c.classes])?;
        Ok(DenoiserForward { logits, attention })
    }

    /// Per-position distributions over the `K` classes for one sequence, `[L, K]`.
    pub fn forward(&self, xt: &TokenSequence, t: usize, style: usize) -> Result<Tensor> {
        let mut out = self.predict_x0(&[&xt.tokens], &[t], &[style])?;
        Tensor::new([self.config.seq_len, self.config.classes], out.remove(0))
    }
}

impl X0Predictor for DenoiserModel {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn predict_x0(&self, xt: &[&[usize]], t: &[usize], styles: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let fwd = self.forward_graph(&mut g, &bound, xt, t, styles)?;
        let probs = softmax_tensor(g.value(fwd.logits), 1)?;
        let per_seq = self.config.seq_len * self.config.classes;
        Ok(probs.data().chunks(per_seq).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub aux_weight: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig::desk(),
            aux_weight: DEFAULT_AUX_WEIGHT,
        }
    }
}

impl DenoiserTrainConfig {
    /// Batch 16 with the full-scale optimizer.
    pub fn paper() -> Self {
        Self {
            batch_size: 16,
            optimizer: AdamWConfig::paper(),
            ..Self::default()
        }
    }
}

/// Trains a freshly initialized denoiser on style-labelled token sequences.
pub fn train_denoiser<R: Rng + ?Sized>(
    data: &[TokenSequence],
    model_config: DenoiserConfig,
    schedule: &NoiseSchedule,
    train: &DenoiserTrainConfig,
    rng: &mut R,
) -> Result<(DenoiserModel, LossHistory)> {
    let model = DenoiserModel::new(model_config, rng)?;
    continue_denoiser_training(model, data, schedule, train, rng)
}

/// Runs `train.steps` optimizer steps with uniformly drawn timesteps.
pub fn continue_denoiser_training<R: Rng + ?Sized>(
    mut model: DenoiserModel,
    data: &[TokenSequence],
    schedule: &NoiseSchedule,
    train: &DenoiserTrainConfig,
    rng: &mut R,
) -> Result<(DenoiserModel, LossHistory)> {
    let c = model.config;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty token set".into()));
    }
    if schedule.classes() != c.classes || schedule.steps() != c.steps {
        return Err(Error::Config(format!(
            "schedule (K {}, T {}) does not match denoiser (K {}, T {})",
            schedule.classes(),
            schedule.steps(),
            c.classes,
            c.steps
        )));
    }
    for seq in data {
        seq.check_clean(schedule.mask())?;
        match seq.style {
            Some(y) if y < c.styles => {}
            other => return Err(Error::Config(format!("training sequence has style {other:?}"))),
        }
        if seq.len() != c.seq_len {
            return Err(Error::Shape(format!("token sequence length {}, expected {}", seq.len(), c.seq_len)));
        }
    }
    let mut opt = AdamW::new(train.optimizer, &model.params);
    let mut guard = DivergenceGuard::default();
    let mut history = Vec::with_capacity(train.steps);
    let batch_size = train.batch_size.max(1);

    for step in 0..train.steps {
        let x0: Vec<TokenSequence> = (0..batch_size)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        let ts: Vec<usize> = (0..batch_size).map(|_| rng.random_range(1..=c.steps)).collect();
        let xt: Vec<TokenSequence> = x0
            .iter()
            .zip(&ts)
            .map(|(x, &t)| schedule.q_forward_sample(x, t, rng))
            .collect::<Result<_>>()?;
        let styles: Vec<usize> = x0.iter().map(|x| x.style.unwrap_or(0)).collect();
        let views: Vec<&[usize]> = xt.iter().map(|x| x.tokens.as_slice()).collect();

        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let fwd = model.forward_graph(&mut g, &bound, &views, &ts, &styles)?;
        let loss = vlb_loss(&mut g, fwd.logits, schedule, &x0, &xt, &ts, train.aux_weight)?;
        let value = g.value(loss.total).item();
        guard.observe(step, value)?;
        let mut grads = g.backward(loss.total)?;
        let grads = bound.grads(&mut grads);
        opt.step(&mut model.params, &grads);
        history.push(value);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_batch, SampleOptions};
    use crate::numerics::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            classes: 5,
            seq_len: 6,
            styles: 3,
            steps: 10,
            d_model: 8,
            blocks: 2,
            heads: 2,
            ffn_mult: 2,
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, cfg: &DenoiserConfig) -> Vec<usize> {
        (0..cfg.seq_len).map(|_| rng.random_range(0..=cfg.classes)).collect()
    }

    #[test]
    fn identity_modulation_reduces_to_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut g = Graph::new();
        let h = g.constant(Tensor::randn([2, 3, 4], 2.0, &mut rng));
        let cond = g.constant(Tensor::randn([2, 1, 4], 1.0, &mut rng));
        let zero_w = g.constant(Tensor::zeros([4, 4]));
        let ones = g.constant(Tensor::full([4], 1.0));
        let zeros = g.constant(Tensor::zeros([4]));
        let out = adaln(&mut g, h, cond, zero_w, ones, zero_w, zeros).unwrap();
        let plain = g.layer_norm(h, ones, zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(out), g.value(plain));
    }

    #[test]
    fn rows_are_distributions_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = tiny();
        let model = DenoiserModel::new(cfg, &mut rng).unwrap();
        for _ in 0..20 {
            let xt = TokenSequence::new(random_tokens(&mut rng, &cfg), None);
            let t = rng.random_range(1..=cfg.steps);
            let out = model.forward(&xt, t, 1).unwrap();
            assert_eq!(out.shape(), &[6, 5]);
            for r in 0..6 {
                assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_eq!(out, model.forward(&xt, t, 1).unwrap());
        }
    }

    #[test]
    fn input_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model = DenoiserModel::new(tiny(), &mut rng).unwrap();
        let bad = TokenSequence::new(vec![0, 1, 6, 0, 0, 0], None);
        assert_eq!(
            model.forward(&bad, 1, 0),
            Err(Error::TokenRange { token: 6, position: 2, mask: 5 })
        );
        let ok = TokenSequence::new(vec![5; 6], None);
        assert!(model.forward(&ok, 1, 0).is_ok());
        assert!(matches!(model.forward(&ok, 0, 0), Err(Error::Timestep { .. })));
        assert!(matches!(model.forward(&ok, 11, 0), Err(Error::Timestep { .. })));
        assert!(model.forward(&ok, 1, 3).is_err());
        assert!(model.forward(&TokenSequence::new(vec![0; 5], None), 1, 0).is_err());
        let mut odd = tiny();
        odd.heads = 3;
        assert!(DenoiserModel::new(odd, &mut rng).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut model = DenoiserModel::new(tiny(), &mut rng).unwrap();
        let (w, b) = model.head_params();
        for id in [w, b] {
            model.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let xt = TokenSequence::new(random_tokens(&mut rng, &tiny()), None);
        let out = model.forward(&xt, 4, 2).unwrap();
        assert!(out.data().iter().all(|&p| p == 0.2));
    }

    #[test]
    fn style_and_timestep_change_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let model = DenoiserModel::new(tiny(), &mut rng).unwrap();
        let xt = TokenSequence::new(random_tokens(&mut rng, &tiny()), None);
        let base = model.forward(&xt, 3, 0).unwrap();
        assert_ne!(base, model.forward(&xt, 3, 1).unwrap());
        assert_ne!(base, model.forward(&xt, 7, 0).unwrap());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let cfg = tiny();
        let model = DenoiserModel::new(cfg, &mut rng).unwrap();
        let a = random_tokens(&mut rng, &cfg);
        let b = random_tokens(&mut rng, &cfg);
        let mut g = Graph::new();
        let bound = model.params().bind_frozen(&mut g);
        let fwd = model.forward_graph(&mut g, &bound, &[&a, &b], &[1, 9], &[0, 2]).unwrap();
        assert_eq!(fwd.attention.len(), 2);
        for &p in &fwd.attention {
            let t = g.value(p);
            assert_eq!(t.shape(), &[4, 6, 6]);
            for row in t.data().chunks(6) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_positions_make_the_model_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let cfg = tiny();
        let mut model = DenoiserModel::new(cfg, &mut rng).unwrap();
        let pos = model.position_embedding_param();
        model.params_mut().get_mut(pos).data_mut().fill(0.0);
        let x = random_tokens(&mut rng, &cfg);
        let perm = [3, 0, 5, 1, 4, 2];
        let px: Vec<usize> = perm.iter().map(|&i| x[i]).collect();
        let out = model.forward(&TokenSequence::new(x, None), 5, 1).unwrap();
        let pout = model.forward(&TokenSequence::new(px, None), 5, 1).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for (a, b) in pout.row(dst).iter().zip(out.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn batch(rng: &mut ChaCha8Rng, cfg: &DenoiserConfig, schedule: &NoiseSchedule) -> (Vec<TokenSequence>, Vec<TokenSequence>, Vec<usize>) {
        let x0: Vec<TokenSequence> = (0..3)
            .map(|i| {
                let toks = (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.classes)).collect();
                TokenSequence::new(toks, Some(i % cfg.styles))
            })
            .collect();
        let ts = vec![1, 4, 10];
        let xt = x0
            .iter()
            .zip(&ts)
            .map(|(x, &t)| schedule.q_forward_sample(x, t, rng).unwrap())
            .collect();
        (x0, xt, ts)
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let cfg = tiny();
        let schedule = NoiseSchedule::linear(cfg.steps, cfg.classes, 0.9, 0.01).unwrap();
        let model = DenoiserModel::new(cfg, &mut rng).unwrap();
        let (x0, xt, ts) = batch(&mut rng, &cfg, &schedule);
        let views: Vec<&[usize]> = xt.iter().map(|x| x.tokens.as_slice()).collect();
        let styles: Vec<usize> = x0.iter().map(|x| x.style.unwrap()).collect();
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g);
        let fwd = model.forward_graph(&mut g, &bound, &views, &ts, &styles).unwrap();
        let loss = vlb_loss(&mut g, fwd.logits, &schedule, &x0, &xt, &ts, 0.1).unwrap();
        let mut grads = g.backward(loss.total).unwrap();
        for ((name, _), grad) in model.params().iter().zip(bound.grads(&mut grads)) {
            assert!(grad.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn full_loss_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let cfg = tiny();
        let schedule = NoiseSchedule::linear(cfg.steps, cfg.classes, 0.9, 0.01).unwrap();
        let model = DenoiserModel::new(cfg, &mut rng).unwrap();
        let (x0, xt, ts) = batch(&mut rng, &cfg, &schedule);
        let views: Vec<&[usize]> = xt.iter().map(|x| x.tokens.as_slice()).collect();
        let styles: Vec<usize> = x0.iter().map(|x| x.style.unwrap()).collect();
        let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let check = check_gradients(
            |g, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                let fwd = model.forward_graph(g, &bound, &views, &ts, &styles)?;
                Ok(vlb_loss(g, fwd.logits, &schedule, &x0, &xt, &ts, 0.1)?.total)
            },
            &inputs,
            1e-5,
            60,
            &mut rng,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn training_fits_a_single_sequence_and_is_reproducible() {
        let cfg = DenoiserConfig { steps: 4, ..tiny() };
        let schedule = NoiseSchedule::linear(cfg.steps, cfg.classes, 0.9, 0.01).unwrap();
        let data = vec![TokenSequence::new(vec![0, 1, 2, 3, 4, 0], Some(1))];
        let train = DenoiserTrainConfig {
            steps: 300,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 1e-2,
                warmup_steps: 20,
                ..AdamWConfig::desk()
            },
            aux_weight: 0.1,
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(39);
            train_denoiser(&data, cfg, &schedule, &train, &mut rng).unwrap()
        };
        let (model, history) = run();
        assert_eq!(history, run().1);
        let head: f64 = history[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = history[280..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.2 * head, "{head} -> {tail}");
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let out = sample_batch(&model, &[1; 10], 6, &schedule, &mut rng, SampleOptions::default()).unwrap();
        let exact = out.iter().filter(|s| s.tokens == data[0].tokens).count();
        assert!(exact >= 8, "{exact} of 10 samples reproduce the training sequence");
    }

    #[test]
    fn training_rejects_bad_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = tiny();
        let schedule = NoiseSchedule::linear(cfg.steps, cfg.classes, 0.9, 0.01).unwrap();
        let train = DenoiserTrainConfig { steps: 1, ..Default::default() };
        let masked = vec![TokenSequence::new(vec![5; 6], Some(0))];
        assert!(train_denoiser(&masked, cfg, &schedule, &train, &mut rng).is_err());
        let unlabelled = vec![TokenSequence::new(vec![0; 6], None)];
        assert!(train_denoiser(&unlabelled, cfg, &schedule, &train, &mut rng).is_err());
        assert!(train_denoiser(&[], cfg, &schedule, &train, &mut rng).is_err());
        let other = NoiseSchedule::linear(7, cfg.classes, 0.9, 0.01).unwrap();
        let ok = vec![TokenSequence::new(vec![0; 6], Some(0))];
        assert!(train_denoiser(&ok, cfg, &other, &train, &mut rng).is_err());
    }
}
