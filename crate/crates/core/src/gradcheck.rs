//! Finite-difference verification of every adapter, block mode, frame
//! weighting and end-to-end loss, in `f64` on tiny shapes.
//!
//! Each check builds a scalar from the operation under test (a fixed random
//! weighting of its output), differentiates it on the tape, and compares a
//! sample of coordinates of every parameter gradient against central
//! differences. Errors are `‖a − n‖ / max(‖a‖, ‖n‖, 1e-3)`: tensors whose
//! true gradient vanishes (attention key biases, for one) are held to an
//! absolute bound instead of a meaningless ratio of rounding noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniadapter_tensor::{OpKind, Tensor, Var};

use crate::adapter::{bottleneck_forward, lora_linear};
use crate::config::{
    Activation, AdaptationConfig, BackboneConfig, Encoder, Modality, QueryForm,
    Sharing, Variant,
};
use crate::error::Result;
use crate::frames::{PfaOptions, VideoFeatures};
use crate::model::{pack_spans, FeatureKind, FeatureSet, Memory, Model, Span};
use crate::plan::build_parameter_plan;
use crate::store::{Graph, Group, ParameterStore};
use crate::train::{batch_loss, Batch, Objectives};

pub const TOLERANCE: f64 = 1e-6;
pub const STEP: f64 = 1e-4;
/// Gradient norm below which errors are measured absolutely.
pub const NORM_FLOOR: f64 = 1e-3;
/// Coordinates sampled per parameter tensor.
const COORDS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    /// Parameter with the largest error.
    pub worst: String,
    pub params: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub corrupted: Option<OpKind>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(k) = self.corrupted {
            let _ = writeln!(s, "note: backward rule of `{k}` deliberately corrupted");
        }
        for r in &self.results {
            let _ = writeln!(
                s,
                "{} {:<34} max rel err {:.3e} over {} tensors (worst: {})",
                if r.passed() { "ok  " } else { "FAIL" },
                r.name,
                r.max_rel_err,
                r.params,
                r.worst
            );
        }
        let _ = writeln!(
            s,
            "{} of {} checks passed (tolerance {TOLERANCE:e})",
            self.results.iter().filter(|r| r.passed()).count(),
            self.results.len()
        );
        s
    }
}

type Forward<'f> = dyn Fn(&Model, &mut Graph<'_, f64>) -> Result<Var> + 'f;

/// Backbone used by every check: width 8, two layers per stack.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        hidden: 8,
        heads: 2,
        visual_depth: 2,
        text_depth: 2,
        fusion_depth: 2,
        decoder_depth: 2,
        patches: 3,
        patch_dim: 6,
        vocab: 12,
        max_text_len: 5,
        ffn_mult: 2,
    }
}

fn adaptation(variant: Variant, activation: Activation) -> AdaptationConfig {
    AdaptationConfig {
        bottleneck: 2,
        lora_rank: 2,
        lora_alpha: 3.0,
        scale: 0.5,
        activation,
        ..AdaptationConfig::plain(variant, 2)
    }
}

const X_SPANS: [usize; 2] = [3, 2];
const MEM_SPANS: [usize; 2] = [4, 3];

/// Store for `a` with every tensor trainable, nonzero up projections and
/// free input tensors `input.x` and `input.mem`.
fn fixture(b: &BackboneConfig, a: &AdaptationConfig, seed: u64) -> Result<ParameterStore<f64>> {
    let plan = build_parameter_plan(b, a)?;
    let mut store: ParameterStore<f64> = plan.materialize(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for slot in 0..store.num_slots() {
        // Move every tensor off its initial value (zero ups, unit gains)
        // so no gradient is trivially zero.
        // The temperature is raised to 0.5: at 0.07 the curvature of 1/τ
        // makes a 1e-4 central difference itself inaccurate beyond 1e-6.
        let s = store.slot_mut(slot);
        if s.name == "head.temp" {
            s.tensor.data_mut().fill(0.5);
        } else {
            for v in s.tensor.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let d = b.hidden;
    let rows: usize = X_SPANS.iter().sum();
    let mem: usize = MEM_SPANS.iter().sum();
    store.insert("input.x", Group::Backbone, Tensor::randn(&[rows, d], 1.0, &mut rng))?;
    store.insert("input.mem", Group::Backbone, Tensor::randn(&[mem, d], 1.0, &mut rng))?;
    for s in 0..store.num_slots() {
        store.slot_mut(s).trainable = true;
    }
    Ok(store)
}

fn weighted_sum(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = g.tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.tape.mul(out, w)?;
    Ok(g.tape.sum(p))
}

fn evaluate(model: &Model, store: &ParameterStore<f64>, f: &Forward<'_>, seed: u64) -> Result<f64> {
    let mut g = Graph::new(store);
    let out = f(model, &mut g)?;
    let loss = weighted_sum(&mut g, out, seed)?;
    Ok(g.tape.value(loss).data()[0])
}

/// Compares tape gradients with central differences for every trainable
/// tensor the forward pass touches.
pub fn check(
    name: &'static str,
    model: &Model,
    store: &ParameterStore<f64>,
    corrupt: Option<OpKind>,
    seed: u64,
    f: &Forward<'_>,
) -> Result<CheckResult> {
    let (analytic, touched) = {
        let mut g = Graph::new(store);
        if let Some(k) = corrupt {
            g.tape.corrupt_backward(k);
        }
        let out = f(model, &mut g)?;
        let loss = weighted_sum(&mut g, out, seed)?;
        let grads = g.tape.backward(loss)?;
        let analytic: BTreeMap<usize, Vec<f64>> = g.slot_grads(&grads).into_iter().collect();
        let touched: Vec<usize> = (0..store.num_slots()).filter(|&s| g.bound(s).is_some()).collect();
        (analytic, touched)
    };
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let mut result = CheckResult {
        name,
        max_rel_err: 0.0,
        worst: String::from("-"),
        params: 0,
    };
    for slot in touched {
        let numel = store.slot(slot).tensor.numel();
        let coords: Vec<usize> = if numel <= COORDS {
            (0..numel).collect()
        } else {
            (0..COORDS).map(|_| rng.random_range(0..numel)).collect()
        };
        let zeros = vec![0.0; numel];
        let full = analytic.get(&slot).unwrap_or(&zeros);
        let a: Vec<f64> = coords.iter().map(|&c| full[c]).collect();
        let mut n = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = store.slot(slot).tensor.data()[c];
            work.slot_mut(slot).tensor.data_mut()[c] = orig + STEP;
            let up = evaluate(model, &work, f, seed)?;
            work.slot_mut(slot).tensor.data_mut()[c] = orig - STEP;
            let down = evaluate(model, &work, f, seed)?;
            work.slot_mut(slot).tensor.data_mut()[c] = orig;
            n.push((up - down) / (2.0 * STEP));
        }
        let err = floored_error(&a, &n);
        result.params += 1;
        if err > result.max_rel_err || err.is_nan() {
            result.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            result.worst = store.slot(slot).name.clone();
        }
    }
    Ok(result)
}

fn floored_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(NORM_FLOOR)
}

fn input_x(g: &mut Graph<'_, f64>) -> Result<Var> {
    g.param("input.x")
}

fn x_spans() -> Vec<Span> {
    pack_spans(X_SPANS)
}

fn mem_spans() -> Vec<Span> {
    pack_spans(MEM_SPANS)
}

fn run_block(
    m: &Model,
    g: &mut Graph<'_, f64>,
    enc: Encoder,
    causal: bool,
) -> Result<Var> {
    let mut x = input_x(g)?;
    let spans = x_spans();
    let mem_rows = g.param("input.mem")?;
    let ms = mem_spans();
    let mem = Memory {
        tokens: mem_rows,
        spans: &ms,
    };
    let with_mem = matches!(enc, Encoder::Fusion | Encoder::Decoder);
    for layer in 0..m.backbone.depth(enc) {
        x = m.block(g, x, enc, layer, &spans, with_mem.then_some(&mem), causal)?;
    }
    Ok(x)
}

struct Case {
    name: &'static str,
    adaptation: AdaptationConfig,
    forward: Box<Forward<'static>>,
}

fn case(
    name: &'static str,
    adaptation: AdaptationConfig,
    forward: impl Fn(&Model, &mut Graph<'_, f64>) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        adaptation,
        forward: Box::new(forward),
    }
}

fn tiny_video_batch(b: &BackboneConfig, seed: u64, frames: usize) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb47c);
    let n = 3;
    let mut caption = |len: usize| -> Vec<usize> { (0..len).map(|_| rng.random_range(3..b.vocab)).collect() };
    let captions = vec![caption(4), caption(3), caption(5)];
    let questions = vec![caption(3), caption(2), caption(4)];
    let answers = vec![caption(1), caption(2), caption(1)];
    let frames = (0..n)
        .map(|_| {
            (0..frames)
                .map(|_| Tensor::randn(&[b.patches, b.patch_dim], 1.0, &mut rng))
                .collect()
        })
        .collect();
    Batch {
        frames,
        video: true,
        captions,
        questions,
        answers,
    }
}

fn cases(b: &BackboneConfig, act: Activation, seed: u64) -> Vec<Case> {
    let uni = AdaptationConfig {
        variant: Variant::UniAdapter,
        sharing: Sharing::ShareDown,
        query_residual: true,
        query_form: QueryForm::Delta,
        pfa: true,
        ..adaptation(Variant::UniAdapter, act)
    };
    let uni_verbatim = AdaptationConfig {
        query_form: QueryForm::Verbatim,
        ..uni.clone()
    };
    let parallel_qr = AdaptationConfig {
        query_residual: true,
        ..adaptation(Variant::ParallelAdapter, act)
    };
    let uni_decoder = AdaptationConfig {
        adapt_decoder: true,
        share_encoder_decoder: true,
        ..uni.clone()
    };
    let s = uni.scale;
    let video = tiny_video_batch(b, seed, 2);
    let video_pfa = video.clone();
    let video_qa = video.clone();
    let image = Batch {
        frames: video.frames.iter().map(|f| vec![f[0].clone()]).collect(),
        video: false,
        ..video.clone()
    };
    let pfa_opts = PfaOptions {
        normalize: false,
        stop_grad: false,
    };
    let pfa_norm = PfaOptions {
        normalize: true,
        stop_grad: false,
    };
    vec![
        case("residual_bottleneck_adapter", adaptation(Variant::ParallelAdapter, act), move |m, g| {
            let x = input_x(g)?;
            let u = m.unit(g, Encoder::Visual, 0)?.expect("visual unit");
            bottleneck_forward(&mut g.tape, x, u.down, u.ups[&Modality::Visual], s, act)
        }),
        case("frozen_block_self_attention", adaptation(Variant::None, act), |m, g| {
            run_block(m, g, Encoder::Text, false)
        }),
        case("frozen_block_cross_attention", adaptation(Variant::None, act), |m, g| {
            run_block(m, g, Encoder::Fusion, false)
        }),
        case("parallel_adapter_block", adaptation(Variant::ParallelAdapter, act), |m, g| {
            run_block(m, g, Encoder::Visual, false)
        }),
        case("sequential_adapter_block", adaptation(Variant::SequentialAdapter, act), |m, g| {
            run_block(m, g, Encoder::Text, false)
        }),
        case("adapter_multimodal_block", adaptation(Variant::ParallelAdapter, act), |m, g| {
            run_block(m, g, Encoder::Fusion, false)
        }),
        case("query_residual_block", parallel_qr, |m, g| {
            run_block(m, g, Encoder::Fusion, false)
        }),
        case("uniadapter_unimodal_shared_down", uni.clone(), |m, g| {
            let x = input_x(g)?;
            let v = m.unit(g, Encoder::Visual, 0)?.expect("visual unit");
            let t = m.unit(g, Encoder::Text, 0)?.expect("text unit");
            let yv = v.unimodal(&mut g.tape, x, Modality::Visual)?;
            let yt = t.unimodal(&mut g.tape, x, Modality::Text)?;
            Ok(g.tape.add(yv, yt)?)
        }),
        case("uniadapter_crossmodal", uni.clone(), |m, g| {
            let x = input_x(g)?;
            let c = m.unit(g, Encoder::Fusion, 0)?.expect("fusion unit");
            c.crossmodal(&mut g.tape, x)
        }),
        case("uniadapter_multimodal_block", uni.clone(), |m, g| {
            run_block(m, g, Encoder::Fusion, false)
        }),
        case("uniadapter_block_verbatim_query", uni_verbatim, |m, g| {
            run_block(m, g, Encoder::Fusion, false)
        }),
        case("uniadapter_shared_decoder_block", uni_decoder.clone(), |m, g| {
            run_block(m, g, Encoder::Decoder, true)
        }),
        case("lora_linear", adaptation(Variant::Lora, act), |m, g| {
            let x = input_x(g)?;
            let w = g.param("text.0.attn.wq")?;
            let bias = g.param("text.0.attn.bq")?;
            let a = g.param("lora.text.0.q.a")?;
            let bb = g.param("lora.text.0.q.b")?;
            lora_linear(&mut g.tape, x, w, Some(bias), a, bb, m.adaptation.lora_alpha)
        }),
        case("lora_block", adaptation(Variant::Lora, act), |m, g| {
            run_block(m, g, Encoder::Fusion, false)
        }),
        case("frame_weights", uni.clone(), move |_, g| {
            let (v, t) = video_inputs(g)?;
            v.pfa_weights(g, t, &PAIRS, pfa_opts)
        }),
        case("frame_weights_normalized", uni.clone(), move |_, g| {
            let (v, t) = video_inputs(g)?;
            v.pfa_weights(g, t, &PAIRS, pfa_norm)
        }),
        case("frame_reweighting", uni.clone(), move |_, g| {
            let (v, t) = video_inputs(g)?;
            let w = v.pfa_weights(g, t, &PAIRS, pfa_opts)?;
            Ok(v.pfa_apply(g, w, &PAIRS)?.0)
        }),
        case("image_retrieval_loss", uni.clone(), move |m, g| {
            Ok(batch_loss(m, g, &image, Objectives::RETRIEVAL, None)?.loss)
        }),
        case("video_retrieval_loss_with_pfa", uni.clone(), move |m, g| {
            Ok(batch_loss(m, g, &video_pfa, Objectives::RETRIEVAL, Some(pfa_opts))?.loss)
        }),
        case("answer_generation_loss", uni_decoder, move |m, g| {
            Ok(batch_loss(m, g, &video_qa, Objectives::QA, None)?.loss)
        }),
        case("lora_retrieval_loss", adaptation(Variant::Lora, act), move |m, g| {
            Ok(batch_loss(m, g, &video, Objectives::RETRIEVAL, None)?.loss)
        }),
    ]
}

const PAIRS: [(usize, usize); 3] = [(0, 0), (1, 1), (1, 0)];

/// Two videos of three frames built from `input.mem`-sized rows: frames are
/// `[cls, tok, tok]` slices of `input.x`/`input.mem` stacked, text CLS rows
/// are the first two rows of `input.x`.
fn video_inputs(g: &mut Graph<'_, f64>) -> Result<(VideoFeatures, Var)> {
    let x = g.param("input.x")?;
    let mem = g.param("input.mem")?;
    let rows = g.tape.concat(&[mem, x, mem], 0)?;
    let rows = g.tape.slice_rows(rows, 0, 18)?;
    let frames = FeatureSet {
        tokens: rows,
        spans: pack_spans([3; 6]),
        kind: FeatureKind::Visual,
    };
    let t = g.tape.slice_rows(x, 0, 2)?;
    Ok((VideoFeatures::new(frames, 3)?, t))
}

/// Runs every check. `corrupt` replaces one backward rule with a wrong one
/// (negative control).
pub fn run_gradcheck(seed: u64, activation: Activation, corrupt: Option<OpKind>) -> Result<GradcheckReport> {
    let b = tiny_backbone();
    let mut results = Vec::new();
    for c in cases(&b, activation, seed) {
        let store = fixture(&b, &c.adaptation, seed)?;
        let model = Model::new(b.clone(), c.adaptation.clone());
        results.push(check(c.name, &model, &store, corrupt, seed, c.forward.as_ref())?);
    }
    Ok(GradcheckReport {
        results,
        corrupted: corrupt,
    })
}

/// Every check name, in report order.
pub fn check_names() -> Vec<&'static str> {
    cases(&tiny_backbone(), Activation::Relu, 0)
        .into_iter()
        .map(|c| c.name)
        .collect()
}
