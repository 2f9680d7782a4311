//! Helpers shared by the integration tests: tiny random batches and a
//! forward pass through every encoder.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniadapter_core::config::{AdaptationConfig, BackboneConfig, OptimizerConfig, Sharing, TaskConfig, Variant};
use uniadapter_core::model::BOS;
use uniadapter_core::train::{batch_loss, Batch, Objectives, Trainer};
use uniadapter_core::{build_parameter_plan, Graph, Group, Model, ParameterStore};
use uniadapter_tensor::{Real, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` images (one frame each) with random captions, questions and answers.
pub fn random_batch<T: Real>(b: &BackboneConfig, rng: &mut ChaCha8Rng, n: usize) -> Batch<T> {
    let tokens = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<usize> {
        let len = rng.random_range(lo..=hi);
        (0..len).map(|_| rng.random_range(3..b.vocab)).collect()
    };
    let frames = (0..n)
        .map(|_| vec![Tensor::randn(&[b.patches, b.patch_dim], 1.0, rng)])
        .collect();
    Batch {
        frames,
        video: false,
        captions: (0..n).map(|_| tokens(rng, 1, b.max_text_len)).collect(),
        questions: (0..n).map(|_| tokens(rng, 1, b.max_text_len)).collect(),
        answers: (0..n).map(|_| tokens(rng, 1, 2)).collect(),
    }
}

/// Store for `a` on `b`, initialised from `seed`.
pub fn store<T: Real>(b: &BackboneConfig, a: &AdaptationConfig, seed: u64) -> (Model, ParameterStore<T>) {
    let plan = build_parameter_plan(b, a).unwrap();
    (Model::new(b.clone(), a.clone()), plan.materialize(seed).unwrap())
}

/// Every output of the model on `batch`: visual tokens, text tokens,
/// fused tokens, decoder logits, matching logits and both contrastive
/// embeddings.
pub fn forward_vars<T: Real>(model: &Model, g: &mut Graph<'_, T>, batch: &Batch<T>) -> Vec<Var> {
    let imgs: Vec<&Tensor<T>> = batch.frames.iter().map(|f| &f[0]).collect();
    let vis = model.encode_visual(g, &imgs).unwrap();
    let texts: Vec<&[usize]> = batch.captions.iter().map(Vec::as_slice).collect();
    let txt = model.encode_text(g, &texts).unwrap();
    let fused = model.fuse(g, &txt, vis.tokens, &vis.spans).unwrap();
    let prompts: Vec<Vec<usize>> = batch
        .answers
        .iter()
        .map(|a| std::iter::once(BOS).chain(a.iter().copied()).collect())
        .collect();
    let logits = model.decode(g, &fused, &prompts).unwrap();
    let itm = model.itm_logits(g, &fused).unwrap();
    let vc = vis.cls(g).unwrap();
    let ve = model.embed(g, vc, "head.vision_proj").unwrap();
    let tc = txt.cls(g).unwrap();
    let te = model.embed(g, tc, "head.text_proj").unwrap();
    vec![vis.tokens, txt.tokens, fused.tokens, logits, itm, ve, te]
}

/// [`forward_vars`] flattened into one vector of values.
pub fn forward_all<T: Real>(model: &Model, store: &ParameterStore<T>, batch: &Batch<T>) -> Vec<T> {
    let mut g = Graph::new(store);
    forward_vars(model, &mut g, batch)
        .into_iter()
        .flat_map(|v| g.tape.value(v).data().to_vec())
        .collect()
}

/// Scalar `Σ wᵢ·outᵢ` over every output with fixed random weights.
pub fn weighted_loss<T: Real>(model: &Model, g: &mut Graph<'_, T>, batch: &Batch<T>, seed: u64) -> Var {
    let mut r = rng(seed);
    let mut total = None;
    for v in forward_vars(model, g, batch) {
        let shape = g.tape.shape(v).to_vec();
        let w = g.tape.constant(Tensor::randn(&shape, 1.0, &mut r));
        let p = g.tape.mul(v, w).unwrap();
        let s = g.tape.sum(p);
        total = Some(match total {
            None => s,
            Some(t) => g.tape.add(t, s).unwrap(),
        });
    }
    total.unwrap()
}

/// Overwrites every tensor whose name satisfies `pick` with N(0, σ²) values
/// drawn from a stream keyed by the name, so two stores with the same
/// names get the same values.
pub fn randomize<T: Real>(store: &mut ParameterStore<T>, sigma: f64, pick: impl Fn(&str) -> bool) {
    for slot in 0..store.num_slots() {
        let name = store.slot(slot).name.clone();
        if !pick(&name) {
            continue;
        }
        let key = name.bytes().fold(0xcbf29ce484222325u64, |h, c| (h ^ c as u64).wrapping_mul(0x100000001b3));
        let shape = store.slot(slot).tensor.shape().to_vec();
        store.slot_mut(slot).tensor = Tensor::randn(&shape, sigma, &mut rng(key));
    }
}

/// Adapter configurations that must leave the backbone function unchanged
/// at initialisation.
pub fn identity_configs() -> Vec<(&'static str, AdaptationConfig)> {
    let uni = AdaptationConfig {
        bottleneck: 2,
        ..AdaptationConfig::default()
    };
    let mut out = vec![
        ("sequential", AdaptationConfig::plain(Variant::SequentialAdapter, 2)),
        ("parallel", AdaptationConfig::plain(Variant::ParallelAdapter, 2)),
        (
            "parallel+query",
            AdaptationConfig {
                query_residual: true,
                ..AdaptationConfig::plain(Variant::ParallelAdapter, 2)
            },
        ),
        (
            "lora",
            AdaptationConfig {
                lora_rank: 2,
                ..AdaptationConfig::plain(Variant::Lora, 2)
            },
        ),
        (
            "uniadapter+decoder",
            AdaptationConfig {
                adapt_decoder: true,
                share_encoder_decoder: true,
                ..uni.clone()
            },
        ),
        (
            "uniadapter+own-decoder",
            AdaptationConfig {
                adapt_decoder: true,
                ..uni.clone()
            },
        ),
    ];
    for (name, sharing) in [
        ("uniadapter/no_share", Sharing::NoShare),
        ("uniadapter/share_down", Sharing::ShareDown),
        ("uniadapter/share_up", Sharing::ShareUp),
        ("uniadapter/share_both", Sharing::ShareBoth),
    ] {
        out.push((name, AdaptationConfig { sharing, ..uni.clone() }));
    }
    out
}

/// Configurations whose outputs differ from the plain backbone on any of
/// `batches × 10` random inputs at initialisation (bitwise comparison).
pub fn zero_init_mismatches(b: &BackboneConfig, batches: usize, seed: u64) -> Vec<&'static str> {
    let (base_model, base) = store::<f64>(b, &AdaptationConfig::plain(Variant::None, 2), seed);
    let mut r = rng(seed ^ 0x1d);
    let inputs: Vec<Batch<f64>> = (0..batches).map(|_| random_batch(b, &mut r, 10)).collect();
    let want: Vec<Vec<f64>> = inputs.iter().map(|x| forward_all(&base_model, &base, x)).collect();
    identity_configs()
        .into_iter()
        .filter(|(_, a)| {
            let (m, s) = store::<f64>(b, a, seed);
            inputs.iter().zip(&want).any(|(x, w)| &forward_all(&m, &s, x) != w)
        })
        .map(|(n, _)| n)
        .collect()
}

/// What a frozen-backbone training run touched.
#[derive(Debug)]
pub struct FreezeOutcome {
    pub backbone_unchanged: bool,
    pub heads_unchanged: bool,
    pub adapters_moved: bool,
    /// Gradients computed for non-adapter tensors in one probe step.
    pub frozen_grads: usize,
}

/// Trains `a` for `steps` optimizer steps on random batches and reports
/// which groups changed.
pub fn freeze_run(b: &BackboneConfig, a: &AdaptationConfig, steps: usize, seed: u64) -> FreezeOutcome {
    let (model, store) = store::<f32>(b, a, seed);
    let mut r = rng(seed ^ 0xf7);
    let probe: Batch<f32> = random_batch(b, &mut r, 6);
    let frozen_grads = {
        let mut g = Graph::new(&store);
        let loss = batch_loss(&model, &mut g, &probe, Objectives::RETRIEVAL, None).unwrap().loss;
        let grads = g.tape.backward(loss).unwrap();
        (0..store.num_slots())
            .filter(|&s| store.slot(s).group != Group::Adapter)
            .filter(|&s| g.bound(s).is_some_and(|v| grads.get(v).is_some()))
            .count()
    };
    let before = (store.digest(Group::Backbone), store.digest(Group::Head), store.digest(Group::Adapter));
    let opt = OptimizerConfig {
        lr: 1e-2,
        ..OptimizerConfig::default()
    };
    let mut t = Trainer::new(model, store, opt, TaskConfig::default(), Objectives::RETRIEVAL);
    for _ in 0..steps {
        let batch = random_batch(b, &mut r, 6);
        t.train_step(&batch, 1e-2).unwrap();
    }
    FreezeOutcome {
        backbone_unchanged: t.store.digest(Group::Backbone) == before.0,
        heads_unchanged: t.store.digest(Group::Head) == before.1,
        adapters_moved: t.store.digest(Group::Adapter) != before.2,
        frozen_grads,
    }
}

/// Largest relative difference between the gradient of each shared tensor
/// and the sum of the gradients its copies receive in an unshared clone,
/// together with the largest output difference between the two models.
pub fn sharing_equivalence(b: &BackboneConfig, a: &AdaptationConfig, seed: u64) -> (f64, f64) {
    let (model, mut shared) = store::<f64>(b, a, seed);
    randomize(&mut shared, 0.5, |n| n.starts_with("adapter."));
    let plain = AdaptationConfig {
        sharing: Sharing::NoShare,
        ..a.clone()
    };
    let (clone_model, mut clone) = store::<f64>(b, &plain, seed);
    // every copy starts from the tensor it is an alias of
    for slot in 0..clone.num_slots() {
        let name = clone.slot(slot).name.clone();
        clone.slot_mut(slot).tensor = shared.get(&name).unwrap().clone();
    }
    let batch = random_batch(b, &mut rng(seed ^ 0x5a), 4);
    let run = |m: &Model, s: &ParameterStore<f64>| {
        let mut g = Graph::new(s);
        let loss = weighted_loss(m, &mut g, &batch, seed);
        let value = g.tape.value(loss).data()[0];
        let grads = g.tape.backward(loss).unwrap();
        let named: Vec<(String, Vec<f64>)> = g
            .slot_grads(&grads)
            .into_iter()
            .map(|(slot, gr)| (s.slot(slot).name.clone(), gr))
            .collect();
        (value, named)
    };
    let (v1, g1) = run(&model, &shared);
    let (v2, g2) = run(&clone_model, &clone);
    let mut worst = 0.0f64;
    for (name, grad) in &g1 {
        let mut sum = vec![0.0; grad.len()];
        for (n2, gr2) in &g2 {
            if shared.canonical(n2).unwrap() == name {
                for (s, x) in sum.iter_mut().zip(gr2) {
                    *s += x;
                }
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&sum).map(|(x, y)| x - y).collect();
        worst = worst.max(norm(&diff) / norm(grad).max(norm(&sum)).max(1e-300));
    }
    (worst, (v1 - v2).abs())
}
