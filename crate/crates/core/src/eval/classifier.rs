use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::music::{Corpus, Pianoroll, PITCHES};
use crate::numerics::{
    softmax_tensor, AdamW, AdamWConfig, Bound, DivergenceGuard, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::vqvae::LossHistory;

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub classes: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    /// Time max-pooling applied to the pianoroll before the first layer.
    pub pool: usize,
    /// Weight of the newest batch in the running normalization statistics.
    pub momentum: f64,
}

impl ClassifierConfig {
    /// Five layers of 32 channels, kernel 3, time pooling 4.
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            channels: 32,
            layers: 5,
            kernel: 3,
            pool: 4,
            momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        if self.channels == 0 || self.layers == 0 || self.pool == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid classifier config {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Conv -> ReLU -> batch norm, repeated, then a time-averaged dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleClassifier {
    config: ClassifierConfig,
    params: ParamStore,
    blocks: Vec<ConvBlock>,
    dense_w: ParamId,
    dense_b: ParamId,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

impl StyleClassifier {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.channels, config.kernel);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let cin = if i == 0 { PITCHES } else { c };
            let std = libm::sqrt(2.0 / (cin * k) as f64);
            blocks.push(ConvBlock {
                w: params.add(&format!("conv{i}.weight"), Tensor::randn([c, cin, k], std, rng)),
                b: params.add(&format!("conv{i}.bias"), Tensor::zeros([c])),
                gamma: params.add(&format!("bn{i}.gamma"), Tensor::full([c], 1.0)),
                beta: params.add(&format!("bn{i}.beta"), Tensor::zeros([c])),
            });
        }
        let dense_w = params.add("dense.weight", Tensor::randn([c, config.classes], 0.01, rng));
        let dense_b = params.add("dense.bias", Tensor::zeros([config.classes]));
        Ok(Self {
            config,
            params,
            blocks,
            dense_w,
            dense_b,
            running_mean: vec![vec![0.0; c]; config.layers],
            running_var: vec![vec![1.0; c]; config.layers],
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Trainable parameters followed by the running normalization statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.into(), t.clone())).collect();
        for (i, (m, v)) in self.running_mean.iter().zip(&self.running_var).enumerate() {
            out.push((format!("bn{i}.running_mean"), Tensor::from_vec(m.clone())));
            out.push((format!("bn{i}.running_var"), Tensor::from_vec(v.clone())));
        }
        out
    }

    /// Inverse of [`StyleClassifier::named_tensors`].
    pub fn load_named(&mut self, mut named: Vec<(String, Tensor)>) -> Result<()> {
        let n = self.params.len();
        if named.len() != n + 2 * self.config.layers {
            return Err(Error::Config(format!(
                "classifier expects {} tensors, found {}",
                n + 2 * self.config.layers,
                named.len()
            )));
        }
        let running = named.split_off(n);
        let c = self.config.channels;
        for (i, pair) in running.chunks(2).enumerate() {
            let expect = [format!("bn{i}.running_mean"), format!("bn{i}.running_var")];
            for ((name, t), want) in pair.iter().zip(&expect) {
                if name != want || t.shape() != [c] {
                    return Err(Error::Config(format!("unexpected tensor {name} {:?}", t.shape())));
                }
            }
        }
        self.params.load(named)?;
        for (i, pair) in running.chunks(2).enumerate() {
            self.running_mean[i] = pair[0].1.data().to_vec();
            self.running_var[i] = pair[1].1.data().to_vec();
        }
        Ok(())
    }

    /// Stacks pooled pianorolls into `[B, 128, ceil(F / pool)]`.
    pub fn input_tensor(&self, rolls: &[&Pianoroll]) -> Result<Tensor> {
        let frames = rolls.first().map(|r| r.frames()).unwrap_or(0);
        if rolls.is_empty() || frames == 0 || rolls.iter().any(|r| r.frames() != frames) {
            return Err(Error::Shape("classifier batch needs equal, non-zero lengths".into()));
        }
        let pooled = frames.div_ceil(self.config.pool);
        let mut data = Vec::with_capacity(rolls.len() * PITCHES * pooled);
        for r in rolls {
            data.extend(r.max_pool_time(self.config.pool));
        }
        Tensor::new([rolls.len(), PITCHES, pooled], data)
    }

    /// Logits `[B, classes]`; `train` normalizes with batch statistics and
    /// returns them per layer, otherwise the running statistics are used.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        train: bool,
    ) -> Result<(Var, Vec<(Vec<f64>, Vec<f64>)>)> {
        let c = self.config.channels;
        let mut h = x;
        let mut stats = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            h = g.conv1d(h, bound.var(blk.w), bound.var(blk.b), 1, self.config.kernel / 2)?;
            h = g.relu(h)?;
            let (gamma, beta) = (bound.var(blk.gamma), bound.var(blk.beta));
            if train {
                let (out, s) = g.batch_norm(h, gamma, beta, BN_EPS)?;
                stats.push((s.mean, s.var));
                h = out;
            } else {
                let mean = g.constant(Tensor::new([c, 1], self.running_mean[i].clone())?);
                let inv: Vec<f64> = self.running_var[i].iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
                let inv = g.constant(Tensor::new([c, 1], inv)?);
                let gamma = g.reshape(gamma, [c, 1])?;
                let beta = g.reshape(beta, [c, 1])?;
                h = g.sub(h, mean)?;
                h = g.mul(h, inv)?;
                h = g.mul(h, gamma)?;
                h = g.add(h, beta)?;
            }
        }
        let pooled = g.mean_axis(h, 2)?;
        let logits = g.matmul(pooled, bound.var(self.dense_w))?;
        let logits = g.add(logits, bound.var(self.dense_b))?;
        Ok((logits, stats))
    }

    /// Label probabilities per roll, using the running statistics.
    pub fn classify_batch(&self, rolls: &[&Pianoroll]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(self.input_tensor(rolls)?);
        let (logits, _) = self.forward_graph(&mut g, &bound, x, false)?;
        let probs = softmax_tensor(g.value(logits), 1)?;
        Ok(probs.data().chunks(self.config.classes).map(<[f64]>::to_vec).collect())
    }

    pub fn classify(&self, roll: &Pianoroll) -> Result<Vec<f64>> {
        Ok(self.classify_batch(&[roll])?.remove(0))
    }

    /// Most probable label; ties go to the lowest index.
    pub fn predict(&self, roll: &Pianoroll) -> Result<usize> {
        Ok(argmax(&self.classify(roll)?))
    }

    /// Fraction of `items` whose predicted label matches.
    pub fn accuracy(&self, items: &[(Pianoroll, usize)]) -> Result<f64> {
        let pairs = self.predict_pairs(items)?;
        Ok(tally_predictions(&pairs, self.config.classes)?.overall)
    }

    fn predict_pairs(&self, items: &[(Pianoroll, usize)]) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(64) {
            let rolls: Vec<&Pianoroll> = chunk.iter().map(|(r, _)| r).collect();
            for ((_, label), p) in chunk.iter().zip(self.classify_batch(&rolls)?) {
                out.push((*label, argmax(&p)));
            }
        }
        Ok(out)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            optimizer: AdamWConfig::desk(),
        }
    }
}

/// Trains a classifier on every labelled segment of `corpus`.
pub fn train_classifier<R: Rng + ?Sized>(
    corpus: &Corpus,
    config: ClassifierConfig,
    train: &ClassifierTrainConfig,
    rng: &mut R,
) -> Result<(StyleClassifier, LossHistory)> {
    let present = corpus.label_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::Config(format!(
            "style classifier needs at least two labels with data, found {present}"
        )));
    }
    if corpus.num_labels() > config.classes {
        return Err(Error::Config(format!(
            "corpus has {} labels but the classifier only {}",
            corpus.num_labels(),
            config.classes
        )));
    }
    let mut model = StyleClassifier::new(config, rng)?;
    let mut opt = AdamW::new(train.optimizer, &model.params);
    let mut guard = DivergenceGuard::default();
    let mut history = Vec::with_capacity(train.steps);
    let batch_size = train.batch_size.max(2);
    let m = config.momentum;

    for step in 0..train.steps {
        let picks: Vec<&(Pianoroll, usize)> = (0..batch_size)
            .map(|_| &corpus.items()[rng.random_range(0..corpus.len())])
            .collect();
        let rolls: Vec<&Pianoroll> = picks.iter().map(|(r, _)| r).collect();
        let labels: Vec<usize> = picks.iter().map(|(_, l)| *l).collect();
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let x = g.constant(model.input_tensor(&rolls)?);
        let (logits, stats) = model.forward_graph(&mut g, &bound, x, true)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let value = g.value(loss).item();
        guard.observe(step, value)?;
        let mut grads = g.backward(loss)?;
        let grads = bound.grads(&mut grads);
        opt.step(&mut model.params, &grads);
        for (i, (mean, var)) in stats.into_iter().enumerate() {
            for (r, v) in model.running_mean[i].iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in model.running_var[i].iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
        history.push(value);
    }
    Ok((model, history))
}

/// Confusion counts indexed `[requested][predicted]` with derived accuracies.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleReport {
    pub confusion: Vec<Vec<usize>>,
    /// `None` for labels that were never requested.
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
}

/// Builds a [`StyleReport`] from `(requested, predicted)` pairs.
pub fn tally_predictions(pairs: &[(usize, usize)], classes: usize) -> Result<StyleReport> {
    if pairs.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for &(want, got) in pairs {
        if want >= classes || got >= classes {
            return Err(Error::Config(format!("label pair ({want}, {got}) outside 0..{classes}")));
        }
        confusion[want][got] += 1;
    }
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect();
    let hits = (0..classes).map(|i| confusion[i][i]).sum::<usize>();
    Ok(StyleReport {
        confusion,
        per_class,
        overall: hits as f64 / pairs.len() as f64,
    })
}

/// Scores generated rolls against the style each was conditioned on.
pub fn style_accuracy(generated: &[(Pianoroll, usize)], classifier: &StyleClassifier) -> Result<StyleReport> {
    let pairs = classifier.predict_pairs(generated)?;
    tally_predictions(&pairs, classifier.config.classes)
}
