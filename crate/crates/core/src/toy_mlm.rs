//! A deliberately small masked-token predictor.
//!
//! For every labelled position the model concatenates the mean embedding of
//! the visible tokens in the window (attended, not selected for masking)
//! with the embedding of the token at the position itself, applies one tanh
//! layer and a softmax over the vocabulary. Gradients are derived by hand.
//! Losses are natural-log cross-entropies, so perplexities are in nats.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::lexicon::EntityLexicon;
use crate::masking::{make_batches, MaskedBatch, MaskedExample, MaskingConfig, Strategy, IGNORE_INDEX};
use crate::rng::{keyed_rng, Purpose};
use crate::tokenizer::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BEMTOYMD";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const SWEEP_CSV_HEADER: &str = "rho,perplexity,masked_positions";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dim: 16,
            hidden: 32,
            learning_rate: 0.5,
            epochs: 20,
            init_scale: 0.05,
            seed: 0,
        }
    }
}

/// Parameter tensors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `vocab x dim`
    pub emb: Vec<f64>,
    /// `2*dim x hidden`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden x vocab`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Params {
    fn zeros(vocab: usize, dim: usize, hidden: usize) -> Self {
        Params {
            emb: vec![0.0; vocab * dim],
            w1: vec![0.0; 2 * dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * vocab],
            b2: vec![0.0; vocab],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.emb, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.emb, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub vocab_size: usize,
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cross_entropy: f64,
    pub perplexity: f64,
    pub masked_position_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch, accumulated while training.
    pub loss_curve: Vec<f64>,
    pub positions_per_epoch: usize,
}

/// Per-position loss terms with logits shifted by their maximum:
/// `nll = ln(z) - gold`.
#[derive(Debug, Clone, Copy)]
struct Term {
    nll: f64,
    z: f64,
    gold: f64,
}

fn targets(ex: &MaskedExample) -> impl Iterator<Item = (usize, usize)> + '_ {
    ex.masked_positions.iter().filter_map(|&p| {
        let label = *ex.label_ids.get(p as usize)?;
        (label != IGNORE_INDEX).then_some((p as usize, label as usize))
    })
}

fn batch_targets(batch: &MaskedBatch) -> usize {
    batch.examples.iter().map(|e| targets(e).count()).sum()
}

impl ToyModel {
    /// Uniform initialization in `[-init_scale, init_scale]` for the
    /// embedding and weight matrices; biases start at zero.
    pub fn new(vocab_size: usize, config: ToyConfig) -> Self {
        let mut params = Params::zeros(vocab_size, config.dim, config.hidden);
        let mut rng = keyed_rng(config.seed, Purpose::ModelInit, 0, 0);
        let s = config.init_scale;
        for t in [&mut params.emb, &mut params.w1, &mut params.w2] {
            for v in t.iter_mut() {
                *v = if s > 0.0 { rng.gen_range(-s..=s) } else { 0.0 };
            }
        }
        ToyModel {
            config,
            vocab_size,
            params,
        }
    }

    /// All parameters zero: a uniform predictor.
    pub fn zeros(vocab_size: usize, config: ToyConfig) -> Self {
        ToyModel {
            config,
            vocab_size,
            params: Params::zeros(vocab_size, config.dim, config.hidden),
        }
    }

    fn check_example(&self, ex: &MaskedExample) -> Result<()> {
        let n = ex.input_ids.len();
        if ex.label_ids.len() != n || ex.attention_mask.len() != n {
            return Err(Error::Precondition(format!(
                "example {}/{}: input, label and attention lengths differ",
                ex.batch_index, ex.example_index
            )));
        }
        if let Some(p) = ex.masked_positions.iter().find(|&&p| p as usize >= n) {
            return Err(Error::Precondition(format!("masked position {p} outside window of {n}")));
        }
        let v = self.vocab_size;
        let bad_input = ex.input_ids.iter().any(|&i| i as usize >= v);
        let bad_label = targets(ex).any(|(_, l)| l >= v);
        if bad_input || bad_label {
            return Err(Error::Precondition(format!("token id outside vocabulary of {v}")));
        }
        Ok(())
    }

    /// Mean embedding of the visible context, or zeros when nothing is
    /// visible. Returns the contributing token ids too.
    fn context(&self, ex: &MaskedExample) -> (Vec<f64>, Vec<usize>) {
        let d = self.config.dim;
        let mut hidden = vec![false; ex.input_ids.len()];
        for &p in &ex.masked_positions {
            hidden[p as usize] = true;
        }
        let ids: Vec<usize> = (0..ex.input_ids.len())
            .filter(|&j| ex.attention_mask[j] == 1 && !hidden[j])
            .map(|j| ex.input_ids[j] as usize)
            .collect();
        let mut ctx = vec![0.0; d];
        if !ids.is_empty() {
            for &id in &ids {
                for (c, e) in ctx.iter_mut().zip(&self.params.emb[id * d..(id + 1) * d]) {
                    *c += e;
                }
            }
            let n = ids.len() as f64;
            ctx.iter_mut().for_each(|c| *c /= n);
        }
        (ctx, ids)
    }

    fn hidden_layer(&self, x: &[f64]) -> Vec<f64> {
        let h = self.config.hidden;
        let mut z = self.params.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (zj, w) in z.iter_mut().zip(&self.params.w1[i * h..(i + 1) * h]) {
                    *zj += xi * w;
                }
            }
        }
        z.iter_mut().for_each(|v| *v = v.tanh());
        z
    }

    fn logits(&self, a: &[f64]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut out = self.params.b2.clone();
        for (k, &ak) in a.iter().enumerate() {
            if ak != 0.0 {
                for (o, w) in out.iter_mut().zip(&self.params.w2[k * v..(k + 1) * v]) {
                    *o += ak * w;
                }
            }
        }
        out
    }

    fn input(&self, ctx: &[f64], token: usize) -> Vec<f64> {
        let d = self.config.dim;
        let mut x = Vec::with_capacity(2 * d);
        x.extend_from_slice(ctx);
        x.extend_from_slice(&self.params.emb[token * d..(token + 1) * d]);
        x
    }

    /// Probability distributions at `masked_positions`. Masked positions are
    /// excluded from the context whether or not they carry a label.
    pub fn forward(&self, input_ids: &[u32], attention_mask: &[u8], masked_positions: &[u32]) -> Result<Vec<Vec<f64>>> {
        let ex = MaskedExample {
            input_ids: input_ids.to_vec(),
            label_ids: vec![IGNORE_INDEX; input_ids.len()],
            attention_mask: attention_mask.to_vec(),
            masked_positions: masked_positions.to_vec(),
            batch_index: 0,
            example_index: 0,
        };
        self.check_example(&ex)?;
        let (ctx, _) = self.context(&ex);
        Ok(masked_positions
            .iter()
            .map(|&p| {
                let logits = self.logits(&self.hidden_layer(&self.input(&ctx, input_ids[p as usize] as usize)));
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect())
    }

    /// Loss terms for one example; accumulates `scale`-weighted gradients
    /// into `grads` when given.
    fn example_terms(&self, ex: &MaskedExample, mut grads: Option<(&mut Params, f64)>) -> Vec<Term> {
        let (d, h, v) = (self.config.dim, self.config.hidden, self.vocab_size);
        let (ctx, ctx_ids) = self.context(ex);
        let mut dctx = vec![0.0; d];
        let mut terms = Vec::new();
        for (p, gold) in targets(ex) {
            let slot = ex.input_ids[p] as usize;
            let x = self.input(&ctx, slot);
            let a = self.hidden_layer(&x);
            let logits = self.logits(&a);
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let g = logits[gold] - m;
            terms.push(Term { nll: z.ln() - g, z, gold: g });

            let Some((grad, scale)) = grads.as_mut() else { continue };
            let scale = *scale;
            let mut dl: Vec<f64> = e.iter().map(|x| x / z * scale).collect();
            dl[gold] -= scale;
            let mut da = vec![0.0; h];
            for k in 0..h {
                let row = k * v..(k + 1) * v;
                for ((gw, w), dlv) in grad.w2[row.clone()].iter_mut().zip(&self.params.w2[row]).zip(&dl) {
                    *gw += a[k] * dlv;
                    da[k] += w * dlv;
                }
            }
            grad.b2.iter_mut().zip(&dl).for_each(|(gb, dlv)| *gb += dlv);
            let dz: Vec<f64> = da.iter().zip(&a).map(|(d, a)| d * (1.0 - a * a)).collect();
            let mut dx = vec![0.0; 2 * d];
            for (i, xi) in x.iter().enumerate() {
                let row = i * h..(i + 1) * h;
                for ((gw, w), dzj) in grad.w1[row.clone()].iter_mut().zip(&self.params.w1[row]).zip(&dz) {
                    *gw += xi * dzj;
                    dx[i] += w * dzj;
                }
            }
            grad.b1.iter_mut().zip(&dz).for_each(|(gb, dzj)| *gb += dzj);
            for (ge, dxi) in grad.emb[slot * d..(slot + 1) * d].iter_mut().zip(&dx[d..]) {
                *ge += dxi;
            }
            dctx.iter_mut().zip(&dx[..d]).for_each(|(c, dxi)| *c += dxi);
        }
        if let Some((grad, _)) = grads {
            if !terms.is_empty() && !ctx_ids.is_empty() {
                let n = ctx_ids.len() as f64;
                for id in ctx_ids {
                    for (ge, c) in grad.emb[id * d..(id + 1) * d].iter_mut().zip(&dctx) {
                        *ge += c / n;
                    }
                }
            }
        }
        terms
    }

    /// Mean cross-entropy over the labelled positions of `examples` and its
    /// gradient. Both are zero when there is nothing to predict.
    pub fn loss_and_gradient(&self, examples: &[MaskedExample]) -> Result<(f64, Params)> {
        for ex in examples {
            self.check_example(ex)?;
        }
        let n: usize = examples.iter().map(|e| targets(e).count()).sum();
        let mut grads = Params::zeros(self.vocab_size, self.config.dim, self.config.hidden);
        if n == 0 {
            return Ok((0.0, grads));
        }
        let scale = 1.0 / n as f64;
        let mut total = 0.0;
        for ex in examples {
            total += self.example_terms(ex, Some((&mut grads, scale))).iter().map(|t| t.nll).sum::<f64>();
        }
        Ok((total / n as f64, grads))
    }

    pub fn loss(&self, examples: &[MaskedExample]) -> Result<f64> {
        for ex in examples {
            self.check_example(ex)?;
        }
        let terms: Vec<Term> = examples.iter().flat_map(|e| self.example_terms(e, None)).collect();
        if terms.is_empty() {
            return Ok(0.0);
        }
        Ok(terms.iter().map(|t| t.nll).sum::<f64>() / terms.len() as f64)
    }

    /// Plain mini-batch gradient descent, one step per batch, batches in the
    /// given order. Single-threaded so the update sequence is fixed.
    pub fn train(&mut self, batches: &[MaskedBatch]) -> Result<TrainReport> {
        let lr = self.config.learning_rate;
        let positions: usize = batches.iter().map(batch_targets).sum();
        let mut curve = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut total = 0.0;
            for batch in batches {
                let n = batch_targets(batch);
                if n == 0 {
                    continue;
                }
                let (loss, grads) = self.loss_and_gradient(&batch.examples)?;
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        loss,
                        epoch,
                        batch_index: batch.batch_index,
                        learning_rate: lr,
                    });
                }
                total += loss * n as f64;
                for (p, g) in self.params.tensors_mut().into_iter().zip(grads.tensors()) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            let epoch_loss = if positions == 0 { 0.0 } else { total / positions as f64 };
            log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
            curve.push(epoch_loss);
        }
        if !self.params.all_finite() {
            return Err(Error::NonFiniteLoss {
                loss: f64::NAN,
                epoch: self.config.epochs,
                batch_index: 0,
                learning_rate: lr,
            });
        }
        Ok(TrainReport {
            loss_curve: curve,
            positions_per_epoch: positions,
        })
    }

    /// Perplexity over every labelled position of `batches`. Batches are
    /// scored in parallel and reduced in batch order.
    ///
    /// The geometric mean is taken relative to the first position,
    /// `ppl = z0 * exp(-gold0) * exp(mean(nll_i - nll_0))`, which equals
    /// `exp(cross_entropy)` analytically and is exact for a uniform model.
    pub fn perplexity(&self, batches: &[MaskedBatch]) -> Result<EvalResult> {
        for ex in batches.iter().flat_map(|b| &b.examples) {
            self.check_example(ex)?;
        }
        let per_batch: Vec<Vec<Term>> = batches
            .par_iter()
            .map(|b| b.examples.iter().flat_map(|e| self.example_terms(e, None)).collect())
            .collect();
        let terms: Vec<Term> = per_batch.into_iter().flatten().collect();
        let Some(first) = terms.first().copied() else {
            return Err(Error::UndefinedMetric("no masked positions in the evaluation set".into()));
        };
        let n = terms.len() as f64;
        let cross_entropy = terms.iter().map(|t| t.nll).sum::<f64>() / n;
        let spread = terms.iter().map(|t| t.nll - first.nll).sum::<f64>() / n;
        let reference = first.z * (-first.gold).exp();
        let perplexity = if reference.is_finite() {
            reference * spread.exp()
        } else {
            cross_entropy.exp()
        };
        if !perplexity.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: cross_entropy,
                epoch: 0,
                batch_index: 0,
                learning_rate: self.config.learning_rate,
            });
        }
        Ok(EvalResult {
            cross_entropy,
            perplexity: perplexity.max(1.0),
            masked_position_count: terms.len(),
        })
    }

    /// Largest relative error between the analytic gradient and central
    /// differences (step 1e-5) over every parameter, for the loss on one
    /// example. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
    pub fn grad_check(&self, example: &MaskedExample) -> Result<f64> {
        const STEP: f64 = 1e-5;
        let examples = std::slice::from_ref(example);
        let (_, analytic) = self.loss_and_gradient(examples)?;
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for t in 0..5 {
            for i in 0..analytic.tensors()[t].len() {
                let orig = probe.params.tensors()[t][i];
                probe.params.tensors_mut()[t][i] = orig + STEP;
                let up = probe.loss(examples)?;
                probe.params.tensors_mut()[t][i] = orig - STEP;
                let down = probe.loss(examples)?;
                probe.params.tensors_mut()[t][i] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let a = analytic.tensors()[t][i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }

    /// Writes the versioned binary checkpoint: magic, version, dimensions,
    /// hyper-parameters, then every tensor row-major as little-endian f64.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let c = &self.config;
        let mut buf = Vec::with_capacity(64 + self.params.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.vocab_size, c.dim, c.hidden, c.epochs] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&c.seed.to_le_bytes());
        buf.extend_from_slice(&c.learning_rate.to_le_bytes());
        buf.extend_from_slice(&c.init_scale.to_le_bytes());
        for t in self.params.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::format(path, 0, m.to_string());
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated checkpoint"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a toy model checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mut u64s = [0u64; 5];
        for v in u64s.iter_mut() {
            *v = u64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let [vocab_size, dim, hidden, epochs, seed] = u64s;
        let learning_rate = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let init_scale = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let config = ToyConfig {
            dim: dim as usize,
            hidden: hidden as usize,
            learning_rate,
            epochs: epochs as usize,
            init_scale,
            seed,
        };
        let mut model = ToyModel::zeros(vocab_size as usize, config);
        for t in model.params.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
            }
        }
        if take(1).is_ok() {
            return Err(bad("trailing bytes after parameters"));
        }
        if !model.params.all_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(model)
    }
}

/// Parses `start:stop:step` into the inclusive list of values, rounded to
/// nine decimals to keep binary noise out of file output.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("rho sweep {spec:?}: {e}")))?;
    let [start, stop, step] = parts[..] else {
        return Err(Error::Config(format!("rho sweep {spec:?}: expected start:stop:step")));
    };
    if !(step > 0.0) || stop < start {
        return Err(Error::Config(format!("rho sweep {spec:?}: need step > 0 and stop >= start")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    let values: Vec<f64> = (0..n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect();
    if let Some(bad) = values.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("rho {bad} outside (0, 1]")));
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub perplexity: f64,
    pub masked_positions: usize,
}

/// How evaluation batches are masked during a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepEval {
    /// Each model is evaluated under the masking it was trained with: BEM at
    /// its own rho, STM for the baseline.
    Matched,
    /// One fixed STM-masked evaluation set shared by every model.
    Stm,
}

pub struct SweepInputs<'a> {
    pub train: &'a Corpus,
    pub eval: &'a Corpus,
    pub lexicon: &'a EntityLexicon,
    pub vocab: &'a Vocab,
    /// Template for the masks; strategy and rho are overridden.
    pub masking: MaskingConfig,
    pub model: ToyConfig,
    pub eval_mode: SweepEval,
}

impl SweepInputs<'_> {
    fn config(&self, strategy: Strategy, rho: f64) -> MaskingConfig {
        MaskingConfig {
            strategy,
            rho,
            ..self.masking.clone()
        }
    }

    fn train_and_eval(&self, train_cfg: &MaskingConfig, fixed_eval: Option<&[MaskedBatch]>) -> Result<EvalResult> {
        let lexicon = (train_cfg.strategy == Strategy::Bem).then_some(self.lexicon);
        let train = make_batches(self.train, lexicon, self.vocab, train_cfg)?;
        let mut model = ToyModel::new(self.vocab.len(), self.model);
        model.train(&train)?;
        match fixed_eval {
            Some(b) => model.perplexity(b),
            None => model.perplexity(&make_batches(self.eval, lexicon, self.vocab, train_cfg)?),
        }
    }

    fn fixed_eval(&self) -> Result<Option<Vec<MaskedBatch>>> {
        match self.eval_mode {
            SweepEval::Stm => Ok(Some(make_batches(
                self.eval,
                None,
                self.vocab,
                &self.config(Strategy::Stm, self.masking.rho),
            )?)),
            SweepEval::Matched => Ok(None),
        }
    }
}

/// For every rho: BEM-mask the training corpus, train a fresh model from
/// the same initialization and measure its perplexity on the evaluation
/// corpus. Each row depends only on its own rho, so rows are computed in
/// parallel and any row can be reproduced on its own.
pub fn rho_sweep(inputs: &SweepInputs, rhos: &[f64]) -> Result<Vec<SweepRow>> {
    let fixed = inputs.fixed_eval()?;
    rhos.par_iter()
        .map(|&rho| {
            let eval = inputs.train_and_eval(&inputs.config(Strategy::Bem, rho), fixed.as_deref())?;
            Ok(SweepRow {
                rho,
                perplexity: eval.perplexity,
                masked_positions: eval.masked_position_count,
            })
        })
        .collect()
}

/// The same protocol with standard masking, as the reference the rho
/// curve is compared against.
pub fn stm_baseline(inputs: &SweepInputs) -> Result<EvalResult> {
    let fixed = inputs.fixed_eval()?;
    inputs.train_and_eval(&inputs.config(Strategy::Stm, inputs.masking.rho), fixed.as_deref())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.rho, r.perplexity, r.masked_positions));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::lexicon::EntityLexicon;
    use crate::tokenizer::Vocab;

    fn small() -> ToyConfig {
        ToyConfig {
            dim: 4,
            hidden: 5,
            learning_rate: 0.3,
            epochs: 5,
            init_scale: 0.5,
            seed: 3,
        }
    }

    fn example(ids: &[u32], masked: &[(u32, i32)]) -> MaskedExample {
        let mut labels = vec![IGNORE_INDEX; ids.len()];
        for &(p, l) in masked {
            labels[p as usize] = l;
        }
        MaskedExample {
            input_ids: ids.to_vec(),
            label_ids: labels,
            attention_mask: vec![1; ids.len()],
            masked_positions: masked.iter().map(|m| m.0).collect(),
            batch_index: 0,
            example_index: 0,
        }
    }

    #[test]
    fn distributions_sum_to_one() {
        let m = ToyModel::new(12, small());
        for dist in m.forward(&[2, 4, 5, 6, 3], &[1; 5], &[1, 3]).unwrap() {
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let z = ToyModel::zeros(12, small());
        for dist in z.forward(&[2, 4, 3], &[1; 3], &[1]).unwrap() {
            assert!(dist.iter().all(|&p| p == 1.0 / 12.0));
        }
        // everything masked: zero context
        assert_eq!(m.forward(&[4], &[1], &[0]).unwrap().len(), 1);
        assert!(m.forward(&[4], &[1], &[1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = ToyModel::new(9, small());
        let ex = example(&[2, 4, 5, 6, 7, 3, 0], &[(1, 5), (4, 8)]);
        assert!(m.grad_check(&ex).unwrap() < 1e-4);
        let none = example(&[2, 4, 3], &[]);
        let (loss, g) = m.loss_and_gradient(&[none.clone()]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(m.grad_check(&none).unwrap(), 0.0);
    }

    #[test]
    fn zero_model_perplexity_is_vocab_size() {
        for v in [7usize, 10, 30522] {
            let m = ToyModel::zeros(v, small());
            let batch = MaskedBatch {
                batch_index: 0,
                subset: None,
                examples: vec![example(&[2, 4, 5, 3], &[(1, 5), (2, 6)]), example(&[2, 6, 3], &[(1, 4)])],
            };
            let r = m.perplexity(&[batch]).unwrap();
            assert_eq!(r.perplexity, v as f64);
            assert_eq!(r.masked_position_count, 3);
            assert!((r.perplexity - r.cross_entropy.exp()).abs() / r.perplexity < 1e-12);
        }
    }

    #[test]
    fn empty_eval_set_is_undefined() {
        let m = ToyModel::zeros(8, small());
        let batch = MaskedBatch { batch_index: 0, subset: None, examples: vec![example(&[2, 3], &[])] };
        assert!(matches!(m.perplexity(&[batch]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn perfect_predictor() {
        let mut m = ToyModel::zeros(6, small());
        m.params.b2[5] = 1e3;
        let batch = MaskedBatch { batch_index: 0, subset: None, examples: vec![example(&[2, 4, 3], &[(1, 5)])] };
        assert_eq!(m.perplexity(&[batch]).unwrap().perplexity, 1.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let cfg = ToyConfig { learning_rate: 0.0, ..small() };
        let mut m = ToyModel::new(9, cfg);
        let before = m.clone();
        let batch = MaskedBatch { batch_index: 0, subset: None, examples: vec![example(&[2, 4, 5, 3], &[(1, 5)])] };
        m.train(&[batch]).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn huge_learning_rate_aborts() {
        let cfg = ToyConfig { learning_rate: 1e300, epochs: 50, ..small() };
        let mut m = ToyModel::new(9, cfg);
        let batch = MaskedBatch { batch_index: 4, subset: None, examples: vec![example(&[2, 4, 5, 3], &[(1, 5), (2, 7)])] };
        match m.train(&[batch]) {
            Err(Error::NonFiniteLoss { learning_rate, .. }) => assert_eq!(learning_rate, 1e300),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn unlabelled_examples_do_not_affect_loss() {
        let m = ToyModel::new(9, small());
        let a = example(&[2, 4, 5, 3], &[(1, 5)]);
        let mut b = example(&[2, 6, 7, 3], &[]);
        let before = m.loss(&[a.clone(), b.clone()]).unwrap();
        b.input_ids[1] = 8;
        assert_eq!(m.loss(&[a, b]).unwrap(), before);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::new(11, small());
        m.save(dir.path().join("m.bin")).unwrap();
        assert_eq!(ToyModel::load(dir.path().join("m.bin")).unwrap(), m);
        fs::write(dir.path().join("bad.bin"), b"BEMTOYMD").unwrap();
        assert!(ToyModel::load(dir.path().join("bad.bin")).is_err());
    }

    #[test]
    fn sweep_parsing() {
        let rhos = parse_sweep("0.1:1.0:0.1").unwrap();
        assert_eq!(rhos.len(), 10);
        assert_eq!(rhos[2], 0.3);
        assert_eq!(rhos[9], 1.0);
        assert!(parse_sweep("0.5:1.5:0.5").is_err());
        assert!(parse_sweep("0.1:0.2").is_err());
        assert!(parse_sweep("0.2:0.1:0.1").is_err());
    }

    #[test]
    fn small_sweep_runs() {
        let vocab = Vocab::from_tokens(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "the", "virus", "binds", "ace2", "cells", "."]
                ,
        )
        .unwrap();
        let docs = (0..8)
            .map(|i| Document::new(format!("d{i}"), "The virus binds ACE2 cells. The virus binds cells."))
            .collect();
        let corpus = Corpus::from_documents(docs).unwrap();
        let lexicon = EntityLexicon::from_surfaces(["virus", "ace2"], "ENT", &vocab).unwrap();
        let inputs = SweepInputs {
            train: &corpus,
            eval: &corpus,
            lexicon: &lexicon,
            vocab: &vocab,
            masking: MaskingConfig { window_len: 16, batch_size: 2, ..MaskingConfig::bem(0.5, 1) },
            model: small(),
            eval_mode: SweepEval::Matched,
        };
        let rows = rho_sweep(&inputs, &[0.5, 1.0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows, rho_sweep(&inputs, &[0.5, 1.0]).unwrap());
        assert_eq!(rows[1], rho_sweep(&inputs, &[1.0]).unwrap()[0]);
        assert!(sweep_csv(&rows).starts_with("rho,perplexity,masked_positions\n0.5,"));
        let base = stm_baseline(&inputs).unwrap();
        assert!(base.perplexity.is_finite());
        let fixed = SweepInputs { eval_mode: SweepEval::Stm, ..inputs };
        let rows = rho_sweep(&fixed, &[0.5, 1.0]).unwrap();
        assert_eq!(rows[0].masked_positions, rows[1].masked_positions);
    }
}
