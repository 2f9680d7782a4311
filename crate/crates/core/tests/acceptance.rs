//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1–7 and 9 use tiny or analytic fixtures; 6 (statistical part)
//! and 8 share one desk-scale pretraining run. Run with `--nocapture` to
//! see the report.

mod common;

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniadapter_core::checkpoint::Checkpoint;
use uniadapter_core::config::{
    AdaptationConfig, BackboneConfig, LayerSet, OptimizerConfig, RunConfig, Sharing, TaskConfig,
    Variant,
};
use uniadapter_core::data::{gen_sample, gen_video_pair, read_records, write_dataset, write_records, DataKind, SplitSizes, WorldSpec};
use uniadapter_core::frames::{pfa_apply, pfa_weights};
use uniadapter_core::gradcheck::run_gradcheck;
use uniadapter_core::metrics::retrieval_metrics;
use uniadapter_core::train::{Objectives, Trainer};
use uniadapter_core::workflow::{adapt, cmd_params, evaluate, pretrain, pretrain_adaptation, pretrain_recipe, transfer_recipe};
use uniadapter_core::{format_millions, Graph, Group, Model, ParameterStore, Sample};
use uniadapter_tensor::Tensor;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

/// Criteria that cannot pass as written. They are still evaluated and
/// reported; the run fails only if some other criterion fails.
const UNATTAINABLE: &[(usize, &str)] = &[(
    1,
    "the reference 19.0M (18,874,368) and 12.7M (12,582,912) are not the 0.1M rounding of \
     their exact counts under any rule that also gives the other cells (both round-half \
     and ceiling give 18.9M and 12.6M); every exact count matches",
)];

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

fn within(d: Duration, limit: Duration) -> String {
    format!("{:.2}s (limit {:.0}s)", d.as_secs_f64(), limit.as_secs_f64())
}

// ---- 1: parameter counts ----------------------------------------------------

fn count_cells() -> Vec<(&'static str, AdaptationConfig, usize, &'static str)> {
    let adapter = |m: &str, r| AdaptationConfig {
        modalities: m.parse().unwrap(),
        ..AdaptationConfig::plain(Variant::SequentialAdapter, r)
    };
    let uni = |sharing, r| AdaptationConfig {
        sharing,
        bottleneck: r,
        ..AdaptationConfig::default()
    };
    let band = |first, last| AdaptationConfig {
        visual_layers: LayerSet::one_based(first, last),
        text_layers: LayerSet::one_based(first, last),
        fusion_layers: LayerSet::one_based(first, last),
        ..uni(Sharing::ShareDown, 512)
    };
    // exact counts from the closed form (downs + ups) · d · r · layers
    let exact = |mats: usize, r: usize, layers: usize| mats * 768 * r * layers;
    vec![
        ("V", adapter("V", 512), exact(2, 512, 12), "9.5M"),
        ("T", adapter("T", 512), exact(2, 512, 12), "9.5M"),
        ("V+T", adapter("V,T", 512), exact(4, 512, 12), "19.0M"),
        ("C", adapter("C", 512), exact(2, 512, 12), "9.5M"),
        ("V+T+C", adapter("V,T,C", 512), exact(6, 512, 12), "28.4M"),
        ("adapter r=128", adapter("V,T,C", 128), exact(6, 128, 12), "7.1M"),
        ("uniadapter r=128", uni(Sharing::ShareDown, 128), exact(4, 128, 12), "4.8M"),
        ("uniadapter r=512", uni(Sharing::ShareDown, 512), exact(4, 512, 12), "19.0M"),
        ("no_share", uni(Sharing::NoShare, 512), exact(6, 512, 12), "28.4M"),
        ("share_down", uni(Sharing::ShareDown, 512), exact(4, 512, 12), "19.0M"),
        ("share_up", uni(Sharing::ShareUp, 512), exact(4, 512, 12), "19.0M"),
        ("share_both", uni(Sharing::ShareBoth, 512), exact(2, 512, 12), "9.5M"),
        ("layers 1-4", band(1, 4), exact(4, 512, 4), "6.3M"),
        ("layers 5-8", band(5, 8), exact(4, 512, 4), "6.3M"),
        ("layers 9-12", band(9, 12), exact(4, 512, 4), "6.3M"),
        ("layers 5-12", band(5, 12), exact(4, 512, 8), "12.7M"),
    ]
}

fn criterion_1() -> Line {
    let (lines, t) = timed(|| {
        let mut exact_bad = Vec::new();
        let mut rounded_bad = Vec::new();
        for (label, a, exact, printed) in count_cells() {
            let cfg = RunConfig {
                backbone: BackboneConfig::base_audit(),
                adaptation: a,
                ..RunConfig::default()
            };
            let total = cmd_params(&cfg).unwrap().total;
            if total != exact {
                exact_bad.push(format!("{label}: {total} ≠ {exact}"));
            }
            let shown = format_millions(total);
            if shown != printed {
                rounded_bad.push(format!("{label}: {total} → {shown}, reference {printed}"));
            }
        }
        (exact_bad, rounded_bad)
    });
    let (exact_bad, rounded_bad) = lines;
    let fast = t < Duration::from_secs(1);
    let mut detail = format!("16 cells, exact mismatches {exact_bad:?}; rounding mismatches {rounded_bad:?}; ");
    detail += &within(t, Duration::from_secs(1));
    Line {
        id: 1,
        pass: exact_bad.is_empty() && rounded_bad.is_empty() && fast,
        detail,
    }
}

// ---- 2: zero-init identity -----------------------------------------------

fn criterion_2() -> Line {
    let b = BackboneConfig::default();
    let (bad, t) = timed(|| zero_init_mismatches(&b, 10, 2));
    let limit = Duration::from_secs(10);
    Line {
        id: 2,
        pass: bad.is_empty() && t < limit,
        detail: format!(
            "{} configurations × 100 inputs at d={}, bitwise; mismatches {bad:?}; {}",
            identity_configs().len(),
            b.hidden,
            within(t, limit)
        ),
    }
}

// ---- 3: freeze integrity ---------------------------------------------------

fn criterion_3() -> Line {
    let b = BackboneConfig::default();
    let limit = Duration::from_secs(120);
    let (outs, t) = timed(|| {
        [
            ("uniadapter", AdaptationConfig::default()),
            ("lora", AdaptationConfig::plain(Variant::Lora, 16)),
        ]
        .map(|(n, a)| (n, freeze_run(&b, &a, 200, 3)))
    });
    let ok = outs
        .iter()
        .all(|(_, o)| o.backbone_unchanged && o.heads_unchanged && o.adapters_moved && o.frozen_grads == 0);
    let mut detail = String::new();
    for (n, o) in &outs {
        let _ = write!(
            detail,
            "{n}: 200 steps, backbone checksum {}, frozen grads {}; ",
            if o.backbone_unchanged { "unchanged" } else { "CHANGED" },
            o.frozen_grads
        );
    }
    detail += &within(t, limit);
    Line {
        id: 3,
        pass: ok && t < limit,
        detail,
    }
}

// ---- 4: gradient correctness ---------------------------------------------

fn criterion_4() -> Line {
    let limit = Duration::from_secs(30);
    let (r, t) = timed(|| run_gradcheck(0, uniadapter_core::config::Activation::Relu, None).unwrap());
    let worst = r.results.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Line {
        id: 4,
        pass: r.passed() && t < limit,
        detail: format!(
            "{}/{} checks, worst rel err {worst:.2e} (tol 1e-6); {}",
            r.results.len() - r.failures().len(),
            r.results.len(),
            within(t, limit)
        ),
    }
}

// ---- 5: sharing semantics ---------------------------------------------------

fn aliases_equal(s: &ParameterStore<f32>) -> bool {
    s.aliases()
        .iter()
        .all(|(a, c)| s.get(a).unwrap().data() == s.get(c).unwrap().data())
}

fn criterion_5() -> Line {
    let b = uniadapter_core::gradcheck::tiny_backbone();
    let mut worst = 0.0f64;
    for sharing in [Sharing::ShareDown, Sharing::ShareUp, Sharing::ShareBoth] {
        let a = AdaptationConfig {
            sharing,
            bottleneck: 2,
            adapt_decoder: true,
            share_encoder_decoder: true,
            ..AdaptationConfig::default()
        };
        let (g, o) = sharing_equivalence(&b, &a, 11);
        worst = worst.max(g).max(o);
    }
    // aliases after every optimizer step
    let a = AdaptationConfig {
        bottleneck: 2,
        sharing: Sharing::ShareBoth,
        adapt_decoder: true,
        share_encoder_decoder: true,
        ..AdaptationConfig::default()
    };
    let (model, store) = store::<f32>(&b, &a, 11);
    let n_alias = store.aliases().len();
    let mut t = Trainer::new(model, store, OptimizerConfig::default(), TaskConfig::default(), Objectives::RETRIEVAL);
    let mut r = rng(11);
    let mut steps_equal = 0;
    for _ in 0..20 {
        t.train_step(&random_batch(&b, &mut r, 4), 1e-2).unwrap();
        steps_equal += usize::from(aliases_equal(&t.store));
    }
    Line {
        id: 5,
        pass: worst < 1e-10 && steps_equal == 20,
        detail: format!(
            "shared vs summed unshared gradients: worst rel err {worst:.2e} (tol 1e-10, f64); \
             {n_alias} aliases byte-equal after {steps_equal}/20 steps"
        ),
    }
}

// ---- 6: frame-aware attention --------------------------------------------

fn criterion_6(backbone: &ParameterStore<f32>) -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = Vec::new();
    for _ in 0..200 {
        let (n, d) = (rng.random_range(1..10), rng.random_range(1..6));
        let frames: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let text: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = pfa_weights(&frames, &text).unwrap();
        if (w.iter().sum::<f64>() - 1.0).abs() >= 1e-6 {
            failures.push("sum");
        }
        if n == 1 && w != [1.0] {
            failures.push("n=1");
        }
        let same = pfa_weights(&vec![frames[0].clone(); n], &text).unwrap();
        if same.iter().any(|x| (x - 1.0 / n as f64).abs() > 1e-12) {
            failures.push("uniform");
        }
        // rotate frames: weights and reweighted rows rotate with them
        let k = rng.random_range(0..n);
        // each frame: its CLS row plus two patch rows
        let mats: Vec<Tensor<f64>> = frames
            .iter()
            .map(|f| {
                let data = f.iter().copied().chain((0..2 * d).map(|j| j as f64 + 1.0)).collect();
                Tensor::from_vec(vec![3, d], data).unwrap()
            })
            .collect();
        let rot = |i: usize| (i + k) % n;
        let pf: Vec<Vec<f64>> = (0..n).map(|i| frames[rot(i)].clone()).collect();
        let pw = pfa_weights(&pf, &text).unwrap();
        let out = pfa_apply(&mats, &w).unwrap();
        let pm: Vec<Tensor<f64>> = (0..n).map(|i| mats[rot(i)].clone()).collect();
        let pout = pfa_apply(&pm, &pw).unwrap();
        let per = 3 * d;
        let equivariant = (0..n).all(|i| {
            (pw[i] - w[rot(i)]).abs() < 1e-12
                && pout.data()[i * per..(i + 1) * per]
                    .iter()
                    .zip(&out.data()[rot(i) * per..(rot(i) + 1) * per])
                    .all(|(a, b)| (a - b).abs() < 1e-12)
        });
        if !equivariant {
            failures.push("permutation");
        }
    }
    // constructed example: salient CLS collinear with the text CLS
    let text = [1.5, 0.0, 0.0];
    let frames = vec![vec![0.0, 2.0, 0.0], vec![0.8, 0.0, 0.0], vec![0.0, 0.0, -1.0], vec![0.0, 0.3, 0.3]];
    let w = pfa_weights(&frames, &text).unwrap();
    if !(0..4).filter(|&i| i != 1).all(|i| w[1] > w[i]) {
        failures.push("salient");
    }
    let (hits, total) = salient_preference(backbone);
    failures.dedup();
    let stat_ok = hits * 100 >= 95 * total;
    Line {
        id: 6,
        pass: failures.is_empty() && stat_ok,
        detail: format!(
            "200 random cases: failed properties {failures:?}; constructed salient frame strictly maximal; \
             pretrained backbone prefers the salient frame on {hits}/{total} videos (need ≥95%)"
        ),
    }
}

/// Videos of 8 frames with exactly one salient frame, captioned in the
/// pretraining grammar: how often the salient frame's weight exceeds the
/// mean distractor weight under the pretrained encoders.
fn salient_preference(store: &ParameterStore<f32>) -> (usize, usize) {
    let spec = WorldSpec {
        noise_frame_prob: 1.0,
        ..WorldSpec::preset(DataKind::Video)
    };
    let model = Model::new(BackboneConfig::default(), pretrain_adaptation());
    let rows = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).iter().map(|&x| x as f64).collect()).collect()
    };
    let mut hits = 0;
    for i in 0..200 {
        let s = gen_video_pair(&spec, i, 8);
        assert_eq!(s.salient.len(), 1);
        let mut g = Graph::new(store);
        let imgs: Vec<&Tensor<f32>> = s.frames.iter().collect();
        let v = model.encode_visual(&mut g, &imgs).unwrap();
        let t = model.encode_text(&mut g, &[&s.caption]).unwrap();
        let (vc, tc) = (v.cls(&mut g).unwrap(), t.cls(&mut g).unwrap());
        let w = pfa_weights(&rows(g.tape.value(vc)), &rows(g.tape.value(tc))[0]).unwrap();
        let sal = w[s.salient[0]];
        let rest = (1.0 - sal) / 7.0;
        hits += usize::from(sal > rest);
    }
    (hits, 200)
}

// ---- 7: metrics oracle -------------------------------------------------------

fn criterion_7() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    let mut monotone = 0;
    for case in 0..100 {
        let (q, g) = (rng.random_range(1..40), rng.random_range(10..50));
        let scores: Vec<f64> = (0..q * g)
            .map(|_| if case % 4 == 0 { rng.random_range(0..3) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let truth: Vec<usize> = (0..q).map(|_| rng.random_range(0..g)).collect();
        let m = retrieval_metrics(&scores, g, &truth).unwrap();
        let ranks: Vec<usize> = truth
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &scores[i * g..(i + 1) * g];
                let mut order: Vec<usize> = (0..g).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                order.iter().position(|&j| j == t).unwrap() + 1
            })
            .collect();
        let rk = |k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / q as f64;
        let mut sorted = ranks.clone();
        sorted.sort();
        let mdr = if q % 2 == 1 {
            sorted[q / 2] as f64
        } else {
            (sorted[q / 2 - 1] + sorted[q / 2]) as f64 / 2.0
        };
        agree += usize::from(m.r1 == Some(rk(1)) && m.r5 == Some(rk(5)) && m.r10 == Some(rk(10)) && m.mdr == Some(mdr));
        monotone += usize::from(m.r1 <= m.r5 && m.r5 <= m.r10);
    }
    Line {
        id: 7,
        pass: agree == 100 && monotone == 100,
        detail: format!("agrees with the sort oracle on {agree}/100 matrices; R@1 ≤ R@5 ≤ R@10 on {monotone}/100"),
    }
}

// ---- 8: transfer ordering --------------------------------------------------

fn criterion_8(backbone: &ParameterStore<f32>, down: &[Sample], test: &[Sample]) -> Line {
    let limit = Duration::from_secs(600);
    let ((r1, text), t) = timed(|| {
        let mut r1 = Vec::new();
        let mut text = String::new();
        for v in [Variant::LinearProbe, Variant::SequentialAdapter, Variant::UniAdapter, Variant::FullFinetune] {
            let cfg = transfer_recipe(v);
            let tr = adapt(&cfg, backbone, down, |_| {}).unwrap();
            let m = evaluate(&cfg, &tr.model, &tr.store, test).unwrap();
            let x = m.r1.unwrap();
            let _ = write!(text, "{v} {x:.1}, ");
            r1.push(x);
        }
        (r1, text)
    });
    let (lp, seq, uni, ff) = (r1[0], r1[1], r1[2], r1[3]);
    let ordered = lp < seq && seq <= uni && uni >= 0.9 * ff;
    Line {
        id: 8,
        pass: ordered && t < limit,
        detail: format!(
            "test R@1: {text}need lp < seq ≤ uni ≥ 0.9·ff ({:.1}); four runs {}",
            0.9 * ff,
            within(t, limit)
        ),
    }
}

// ---- 9: serialization ----------------------------------------------------

fn criterion_9() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mut notes = Vec::new();

    let a = AdaptationConfig {
        bottleneck: 2,
        adapt_decoder: true,
        share_encoder_decoder: true,
        ..AdaptationConfig::default()
    };
    let (_, mut s) = store::<f32>(&uniadapter_core::gradcheck::tiny_backbone(), &a, 9);
    randomize(&mut s, 0.5, |n| n.starts_with("adapter."));
    let ck = Checkpoint::from_store(&s, |_| true, [9; 32], s.digest(Group::Backbone));
    ck.save(&p("a.ckpt")).unwrap();
    let back = Checkpoint::load(&p("a.ckpt")).unwrap();
    back.save(&p("b.ckpt")).unwrap();
    let ck_same = read(&p("a.ckpt")) == read(&p("b.ckpt"));
    let restored: ParameterStore<f32> = back.to_store().unwrap();
    let aliases_same = restored.aliases() == s.aliases()
        && restored.aliases().iter().all(|(x, c)| restored.slot_of(x).unwrap() == restored.slot_of(c).unwrap());
    notes.push(format!("checkpoint save→load→save identical: {ck_same}; {} aliases restored: {aliases_same}", s.aliases().len()));

    let world = WorldSpec {
        sizes: SplitSizes {
            pretrain: 30,
            downstream: 20,
            test: 10,
        },
        ..WorldSpec::preset(DataKind::Video)
    };
    write_dataset(&world, &p("d1")).unwrap();
    write_dataset(&world, &p("d2")).unwrap();
    let files = ["manifest.json", "pretrain.bin", "downstream.bin", "test.bin"];
    let ds_same = files.iter().all(|f| read(&p("d1").join(f)) == read(&p("d2").join(f)));
    let recs = read_records(&p("d1").join("test.bin")).unwrap();
    write_records(&p("again.bin"), &recs).unwrap();
    let rec_same = read(&p("again.bin")) == read(&p("d1").join("test.bin"));
    notes.push(format!("dataset regeneration identical: {ds_same}; records read→write identical: {rec_same}"));
    Line {
        id: 9,
        pass: ck_same && aliases_same && ds_same && rec_same,
        detail: notes.join("; "),
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

// Runs without the test harness so the report is printed even when every
// criterion passes.
fn main() -> std::process::ExitCode {
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_7(), criterion_9()];

    // shared desk-scale backbone for 6 and 8
    let spec = WorldSpec::preset(DataKind::Image);
    let samples: Vec<Sample> = (0..5200).map(|i| gen_sample(&spec, i)).collect();
    let (pre, down, test) = (&samples[..4000], &samples[4000..5000], &samples[5000..]);
    let (p, t) = timed(|| pretrain(&pretrain_recipe(), pre).unwrap());
    println!("pretraining: {} steps in {:.0}s", p.reports.len(), t.as_secs_f64());
    lines.push(criterion_6(&p.store));
    lines.push(criterion_8(&p.store, down, test));
    lines.sort_by_key(|l| l.id);

    let mut unexpected = Vec::new();
    for l in &lines {
        let known = UNATTAINABLE.iter().find(|(id, _)| *id == l.id);
        println!("criterion {}: {} — {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
        match (l.pass, known) {
            (false, Some((_, why))) => println!("    known: {why}"),
            (false, None) => unexpected.push(l.id),
            _ => {}
        }
    }
    if unexpected.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::ExitCode::FAILURE
    }
}
