//! Optimisation and evaluation loops: batch assembly, the combined
//! contrastive / matching / answer-generation loss, AdamW with warmup and
//! cosine decay, and retrieval / answer-accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uniadapter_tensor::{Real, Tensor, Var};

use crate::config::{OptimizerConfig, TaskConfig};
use crate::data::Sample;
use crate::error::{contract_err, Error, Result};
use crate::frames::{PfaOptions, VideoFeatures};
use crate::metrics::{retrieval_metrics, vqa_accuracy, MetricsRecord};
use crate::model::{FeatureSet, Model, Span};
use crate::objectives::{contrastive_loss, hardest_negatives, itm_loss, lm_loss, teacher_forcing};
use crate::store::{Graph, ParameterStore};

pub const TEMP_RANGE: (f64, f64) = (1e-3, 0.5);
/// Fraction of the schedule spent in linear warmup.
pub const WARMUP_FRACTION: f64 = 0.05;
/// Longest answer the greedy decoder may produce.
pub const MAX_ANSWER_LEN: usize = 4;

/// Which frames of a stored sample enter a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FramePick {
    /// The first salient frame, as a still image.
    Salient,
    /// `k` frames sampled uniformly over the stored clip, as a video.
    Uniform(usize),
}

/// `k` indices spread uniformly over `0..n` (all of them when `k >= n`).
pub fn uniform_frames(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

#[derive(Clone, Debug)]
pub struct Batch<T: Real> {
    /// Per sample: one frame for images, `n` for videos.
    pub frames: Vec<Vec<Tensor<T>>>,
    pub video: bool,
    pub captions: Vec<Vec<usize>>,
    pub questions: Vec<Vec<usize>>,
    pub answers: Vec<Vec<usize>>,
}

impl Batch<f32> {
    pub fn from_samples(samples: &[&Sample], pick: FramePick) -> Self {
        let frames = samples
            .iter()
            .map(|s| match pick {
                FramePick::Salient => vec![s.frames[s.salient.first().copied().unwrap_or(0)].clone()],
                FramePick::Uniform(k) => uniform_frames(s.frames.len(), k)
                    .into_iter()
                    .map(|i| s.frames[i].clone())
                    .collect(),
            })
            .collect();
        Self {
            frames,
            video: matches!(pick, FramePick::Uniform(_)),
            captions: samples.iter().map(|s| s.caption.clone()).collect(),
            questions: samples.iter().map(|s| s.question.clone()).collect(),
            answers: samples.iter().map(|s| s.answer.clone()).collect(),
        }
    }
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            frames: self
                .frames
                .iter()
                .map(|fs| fs.iter().map(Tensor::cast).collect())
                .collect(),
            video: self.video,
            captions: self.captions.clone(),
            questions: self.questions.clone(),
            answers: self.answers.clone(),
        }
    }
}

/// Encoded visual side of a batch.
pub enum Visual {
    Image(FeatureSet),
    Video(VideoFeatures),
}

impl Visual {
    pub fn encode<T: Real>(model: &Model, g: &mut Graph<'_, T>, batch: &Batch<T>) -> Result<Self> {
        if batch.is_empty() {
            return contract_err("empty batch");
        }
        if !batch.video {
            let imgs: Vec<&Tensor<T>> = batch.frames.iter().map(|f| &f[0]).collect();
            return Ok(Visual::Image(model.encode_visual(g, &imgs)?));
        }
        let n = batch.frames[0].len();
        if batch.frames.iter().any(|f| f.len() != n) {
            return contract_err("videos of a batch must have equal frame counts");
        }
        let imgs: Vec<&Tensor<T>> = batch.frames.iter().flatten().collect();
        let fs = model.encode_visual(g, &imgs)?;
        Ok(Visual::Video(VideoFeatures::new(fs, n)?))
    }

    /// Contrastive embedding per item; videos use their mean frame CLS.
    pub fn embedding<T: Real>(&self, model: &Model, g: &mut Graph<'_, T>) -> Result<Var> {
        let cls = match self {
            Visual::Image(fs) => fs.cls(g)?,
            Visual::Video(v) => v.mean_cls(g)?,
        };
        model.embed(g, cls, "head.vision_proj")
    }

    /// Cross-attention memory for `(text row, visual item)` pairs. With
    /// `pfa`, video patch rows are reweighted per pair by frame relevance
    /// to the pair's text CLS.
    pub fn memory<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        text_cls: Var,
        pairs: &[(usize, usize)],
        pfa: Option<PfaOptions>,
    ) -> Result<(Var, Vec<Span>)> {
        match (self, pfa) {
            (Visual::Image(fs), _) => Ok((fs.tokens, pairs.iter().map(|&(_, v)| fs.spans[v]).collect())),
            (Visual::Video(v), None) => Ok((
                v.frames.tokens,
                pairs.iter().map(|&(_, i)| v.concat_span(i)).collect(),
            )),
            (Visual::Video(v), Some(opts)) => {
                let w = v.pfa_weights(g, text_cls, pairs, opts)?;
                v.pfa_apply(g, w, pairs)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objectives {
    pub itc: bool,
    pub itm: bool,
    pub lm: bool,
}

impl Objectives {
    pub const RETRIEVAL: Objectives = Objectives {
        itc: true,
        itm: true,
        lm: false,
    };
    pub const QA: Objectives = Objectives {
        itc: false,
        itm: false,
        lm: true,
    };
    pub const PRETRAIN: Objectives = Objectives {
        itc: true,
        itm: true,
        lm: true,
    };
}

/// Loss node plus the value of each active term.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub loss: Var,
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub lm: Option<f64>,
}

fn values<T: Real>(g: &Graph<'_, T>, v: Var) -> Vec<f64> {
    g.tape.value(v).data().iter().map(|x| x.as_f64()).collect()
}

/// Sum of the active objectives over one batch (equal weights).
pub fn batch_loss<T: Real>(
    model: &Model,
    g: &mut Graph<'_, T>,
    batch: &Batch<T>,
    obj: Objectives,
    pfa: Option<PfaOptions>,
) -> Result<StepLoss> {
    let b = batch.len();
    let visual = Visual::encode(model, g, batch)?;
    let mut terms = Vec::new();
    let (mut itc, mut itm, mut lm) = (None, None, None);
    if obj.itc || obj.itm {
        let caps: Vec<&[usize]> = batch.captions.iter().map(Vec::as_slice).collect();
        let text = model.encode_text(g, &caps)?;
        let t_cls = text.cls(g)?;
        let t_emb = model.embed(g, t_cls, "head.text_proj")?;
        let v_emb = visual.embedding(model, g)?;
        if obj.itc {
            let temp = g.param("head.temp")?;
            let l = contrastive_loss(&mut g.tape, t_emb, v_emb, temp)?;
            itc = Some(g.tape.value(l).data()[0].as_f64());
            terms.push(l);
        }
        if obj.itm {
            let sim = similarity(&values(g, t_emb), &values(g, v_emb), b);
            let neg_v = hardest_negatives(&sim, b)?;
            let sim_t = transpose(&sim, b);
            let neg_t = hardest_negatives(&sim_t, b)?;
            let text_order: Vec<usize> = (0..b).chain(0..b).chain(neg_t).collect();
            let vis_order: Vec<usize> = (0..b).chain(neg_v).chain(0..b).collect();
            let pairs: Vec<(usize, usize)> = text_order.iter().copied().zip(vis_order).collect();
            let ft = text.select(g, &text_order)?;
            let (mem, spans) = visual.memory(g, t_cls, &pairs, pfa)?;
            let fused = model.fuse(g, &ft, mem, &spans)?;
            let logits = model.itm_logits(g, &fused)?;
            let labels: Vec<T> = (0..3 * b).map(|i| T::of(if i < b { 1.0 } else { 0.0 })).collect();
            let l = itm_loss(&mut g.tape, logits, &labels)?;
            itm = Some(g.tape.value(l).data()[0].as_f64());
            terms.push(l);
        }
    }
    if obj.lm {
        let qs: Vec<&[usize]> = batch.questions.iter().map(Vec::as_slice).collect();
        let q = model.encode_text(g, &qs)?;
        let q_cls = q.cls(g)?;
        let pairs: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
        let (mem, spans) = visual.memory(g, q_cls, &pairs, None)?;
        let fused = model.fuse(g, &q, mem, &spans)?;
        let mut prompts = Vec::with_capacity(b);
        let mut targets = Vec::new();
        for a in &batch.answers {
            let (i, t) = teacher_forcing(a)?;
            prompts.push(i);
            targets.extend(t);
        }
        let logits = model.decode(g, &fused, &prompts)?;
        let l = lm_loss(&mut g.tape, logits, &targets)?;
        lm = Some(g.tape.value(l).data()[0].as_f64());
        terms.push(l);
    }
    let Some((&first, rest)) = terms.split_first() else {
        return contract_err("no training objective enabled");
    };
    let mut loss = first;
    for &t in rest {
        loss = g.tape.add(loss, t)?;
    }
    Ok(StepLoss { loss, itc, itm, lm })
}

fn similarity(t: &[f64], v: &[f64], b: usize) -> Vec<f64> {
    let d = t.len() / b;
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            s[i * b + j] = (0..d).map(|k| t[i * d + k] * v[j * d + k]).sum();
        }
    }
    s
}

fn transpose(m: &[f64], b: usize) -> Vec<f64> {
    (0..b * b).map(|k| m[(k % b) * b + k / b]).collect()
}

/// Learning rate at `step` of `total`: linear warmup over the first 5 % of
/// steps, then cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warmup = ((total as f64 * WARMUP_FRACTION).ceil() as usize).max(1);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Whether weight decay applies: matrices only, excluding embedding
/// tables, positions and CLS vectors.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2
        && !name.contains("embed")
        && !name.ends_with(".pos")
        && !name.ends_with(".cls")
}

/// AdamW over the trainable slots of a store. State is per slot, so every
/// alias of a shared tensor sees one update from its summed gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParameterStore<T>, cfg: OptimizerConfig) -> Self {
        let n = store.num_slots();
        Self {
            cfg,
            m: vec![Vec::new(); n],
            v: vec![Vec::new(); n],
            decay: store
                .slots()
                .iter()
                .map(|s| decays(&s.name, s.tensor.shape().len()))
                .collect(),
            t: 0,
        }
    }

    pub fn step<T: Real>(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &[(usize, Vec<T>)],
        lr: f64,
    ) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (slot, g) in grads {
            let slot = *slot;
            let s = store.slot_mut(slot);
            if !s.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            if m.is_empty() {
                m.resize(g.len(), 0.0);
                v.resize(g.len(), 0.0);
            }
            let wd = if self.decay[slot] { c.weight_decay } else { 0.0 };
            for (i, p) in s.tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let x = p.as_f64();
                *p = T::of(x - lr * (update + wd * x));
            }
        }
        if let Ok(slot) = store.slot_of("head.temp") {
            let s = store.slot_mut(slot);
            if s.trainable {
                for p in s.tensor.data_mut() {
                    *p = T::of(p.as_f64().clamp(TEMP_RANGE.0, TEMP_RANGE.1));
                }
            }
        }
    }
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub lm: Option<f64>,
}

/// Owns the model parameters and runs optimizer steps.
pub struct Trainer {
    pub model: Model,
    pub store: ParameterStore<f32>,
    pub task: TaskConfig,
    pub objectives: Objectives,
    pub pfa: Option<PfaOptions>,
    pub pick: FramePick,
    base_lr: f64,
    opt: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(
        model: Model,
        store: ParameterStore<f32>,
        optimizer: OptimizerConfig,
        task: TaskConfig,
        objectives: Objectives,
    ) -> Self {
        let opt = AdamW::new(&store, optimizer.clone());
        Self {
            model,
            store,
            task,
            objectives,
            pfa: None,
            pick: FramePick::Salient,
            base_lr: optimizer.lr,
            opt,
            step: 0,
        }
    }

    /// Optimizer steps for `n` training samples under the task's epoch
    /// count and step cap. A trailing batch smaller than 2 is dropped.
    pub fn total_steps(&self, n: usize) -> usize {
        let b = self.task.batch_size.max(1);
        let per_epoch = n / b + usize::from(n % b >= 2);
        let total = per_epoch * self.task.epochs;
        if self.task.max_steps > 0 {
            total.min(self.task.max_steps)
        } else {
            total
        }
    }

    /// One forward/backward/update on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &Batch<f32>, lr: f64) -> Result<StepReport> {
        let (report, grads) = {
            let mut g = Graph::new(&self.store);
            let out = batch_loss(&self.model, &mut g, batch, self.objectives, self.pfa)?;
            let loss = g.tape.value(out.loss).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    detail: format!(
                        "loss is {loss} (itc {:?}, itm {:?}, lm {:?})",
                        out.itc, out.itm, out.lm
                    ),
                });
            }
            let grads = g.tape.backward(out.loss)?;
            let grads = g.slot_grads(&grads);
            if let Some((slot, _)) = grads
                .iter()
                .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
            {
                return Err(Error::Diverged {
                    step: self.step,
                    detail: format!("non-finite gradient for `{}`", self.store.slot(*slot).name),
                });
            }
            let report = StepReport {
                step: self.step,
                lr,
                loss,
                itc: out.itc,
                itm: out.itm,
                lm: out.lm,
            };
            (report, grads)
        };
        self.opt.step(&mut self.store, &grads, lr);
        self.step += 1;
        Ok(report)
    }

    /// Runs the full schedule over `samples`, calling `on_step` after each
    /// update.
    pub fn fit(
        &mut self,
        samples: &[Sample],
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        let total = self.total_steps(samples.len());
        let b = self.task.batch_size.max(1);
        let mut reports = Vec::with_capacity(total);
        let mut epoch = 0u64;
        while reports.len() < total {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.task.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
            for chunk in order.chunks(b) {
                if reports.len() >= total {
                    break;
                }
                if chunk.len() < 2 {
                    continue;
                }
                let picked: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let batch = Batch::from_samples(&picked, self.pick);
                let lr = cosine_lr(self.base_lr, reports.len(), total);
                let r = self.train_step(&batch, lr)?;
                on_step(&r);
                reports.push(r);
            }
            epoch += 1;
        }
        Ok(reports)
    }
}

/// Rows of a value matrix as `f64` vectors.
fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|x| x.as_f64()).collect())
        .collect()
}

/// Text and visual contrastive embeddings of `samples`, computed in chunks.
pub fn embeddings<T: Real>(
    model: &Model,
    store: &ParameterStore<T>,
    samples: &[Batch<T>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (mut ts, mut vs) = (Vec::new(), Vec::new());
    for batch in samples {
        let mut g = Graph::new(store);
        let caps: Vec<&[usize]> = batch.captions.iter().map(Vec::as_slice).collect();
        let text = model.encode_text(&mut g, &caps)?;
        let t_cls = text.cls(&mut g)?;
        let t = model.embed(&mut g, t_cls, "head.text_proj")?;
        let visual = Visual::encode(model, &mut g, batch)?;
        let v = visual.embedding(model, &mut g)?;
        ts.extend(rows_f64(g.tape.value(t)));
        vs.extend(rows_f64(g.tape.value(v)));
    }
    Ok((ts, vs))
}

pub const EVAL_CHUNK: usize = 50;

fn chunks<'a>(samples: &'a [Sample], pick: FramePick) -> Vec<Batch<f32>> {
    samples
        .chunks(EVAL_CHUNK)
        .map(|c| Batch::from_samples(&c.iter().collect::<Vec<_>>(), pick))
        .collect()
}

/// Text→visual retrieval scores `[queries × gallery]`: cosine similarity of
/// contrastive embeddings. Query `i`'s match is gallery item `i`.
pub fn retrieval_scores(
    model: &Model,
    store: &ParameterStore<f32>,
    samples: &[Sample],
    pick: FramePick,
) -> Result<Vec<f64>> {
    let (t, v) = embeddings(model, store, &chunks(samples, pick))?;
    let n = t.len();
    let mut s = Vec::with_capacity(n * n);
    for ti in &t {
        for vj in &v {
            s.push(ti.iter().zip(vj).map(|(a, b)| a * b).sum());
        }
    }
    Ok(s)
}

pub fn evaluate_retrieval(
    model: &Model,
    store: &ParameterStore<f32>,
    samples: &[Sample],
    pick: FramePick,
) -> Result<MetricsRecord> {
    let scores = retrieval_scores(model, store, samples, pick)?;
    let n = samples.len();
    retrieval_metrics(&scores, n, &(0..n).collect::<Vec<_>>())
}

/// Greedy answers to each sample's question.
pub fn answer_questions(
    model: &Model,
    store: &ParameterStore<f32>,
    samples: &[Sample],
    pick: FramePick,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(samples.len());
    for batch in chunks(samples, pick) {
        let mut g = Graph::new(store);
        let visual = Visual::encode(model, &mut g, &batch)?;
        let qs: Vec<&[usize]> = batch.questions.iter().map(Vec::as_slice).collect();
        let q = model.encode_text(&mut g, &qs)?;
        let q_cls = q.cls(&mut g)?;
        let pairs: Vec<(usize, usize)> = (0..batch.len()).map(|i| (i, i)).collect();
        let (mem, spans) = visual.memory(&mut g, q_cls, &pairs, None)?;
        let fused = model.fuse(&mut g, &q, mem, &spans)?;
        out.extend(model.greedy_decode(&mut g, &fused, MAX_ANSWER_LEN)?);
    }
    Ok(out)
}

pub fn evaluate_vqa(
    model: &Model,
    store: &ParameterStore<f32>,
    samples: &[Sample],
    pick: FramePick,
) -> Result<MetricsRecord> {
    let pred = answer_questions(model, store, samples, pick)?;
    let gold: Vec<Vec<usize>> = samples.iter().map(|s| s.answer.clone()).collect();
    Ok(MetricsRecord {
        acc: Some(vqa_accuracy(&pred, &gold)?),
        ..MetricsRecord::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let total = 100;
        assert!((cosine_lr(1.0, 0, total) - 0.2).abs() < 1e-12);
        assert!((cosine_lr(1.0, 4, total) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 50, total) < 1.0);
        assert!(cosine_lr(1.0, 99, total) < 1e-3);
    }

    #[test]
    fn uniform_frames_cover_the_clip() {
        assert_eq!(uniform_frames(16, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(uniform_frames(3, 8), vec![0, 1, 2]);
    }

    #[test]
    fn decay_skips_vectors_and_tables() {
        assert!(decays("text.0.attn.wq", 2));
        assert!(!decays("text.tok_embed", 2));
        assert!(!decays("visual.pos", 2));
        assert!(!decays("text.0.ln1.g", 1));
    }

    #[test]
    fn transpose_of_square() {
        assert_eq!(transpose(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 3.0, 2.0, 4.0]);
    }
}
