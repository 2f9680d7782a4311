//! Checkpoint files and the file-based workflow commands.

mod common;

use common::*;
use uniadapter_core::checkpoint::{Checkpoint, MAGIC};
use uniadapter_core::config::{AdaptationConfig, RunConfig, Variant};
use uniadapter_core::data::{DataKind, Dataset, Split, SplitSizes, WorldSpec};
use uniadapter_core::gradcheck::tiny_backbone;
use uniadapter_core::metrics::read_csv;
use uniadapter_core::workflow::{cmd_adapt, cmd_eval, cmd_gen_data, cmd_pretrain, evaluate};
use uniadapter_core::{Error, Group, Model, ParameterStore};

fn adapter_store() -> ParameterStore<f32> {
    let a = AdaptationConfig {
        bottleneck: 2,
        ..AdaptationConfig::default()
    };
    let (_, mut s) = store::<f32>(&tiny_backbone(), &a, 3);
    randomize(&mut s, 0.5, |n| n.starts_with("adapter."));
    s
}

#[test]
fn save_load_save_is_byte_identical() {
    let s = adapter_store();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let ck = Checkpoint::from_store(&s, |_| true, [1; 32], s.digest(Group::Backbone));
    ck.save(&p1).unwrap();
    let back = Checkpoint::load(&p1).unwrap();
    assert_eq!(back, ck);
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(&std::fs::read(&p1).unwrap()[..4], MAGIC);
}

#[test]
fn restored_store_keeps_aliases_live() {
    let s = adapter_store();
    let ck = Checkpoint::from_store(&s, |_| true, [0; 32], [0; 32]);
    let mut back: ParameterStore<f32> = ck.to_store().unwrap();
    assert_eq!(back.num_slots(), s.num_slots());
    assert_eq!(back.aliases(), s.aliases());
    for name in s.names() {
        assert_eq!(back.get(name).unwrap(), s.get(name).unwrap(), "{name}");
    }
    back.get_mut("adapter.fusion.0.down").unwrap().data_mut()[1] = -7.0;
    assert_eq!(back.get("adapter.text.0.down").unwrap().data()[1], -7.0);
    let trainable: Vec<usize> = back.trainable_slots().collect();
    assert_eq!(trainable, s.trainable_slots().collect::<Vec<_>>());
}

#[test]
fn damaged_files_are_refused() {
    let s = adapter_store();
    let bytes = Checkpoint::from_store(&s, |_| true, [0; 32], [0; 32]).to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Checkpoint(_))));
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    assert!(Checkpoint::from_bytes(&bad_version).is_err());
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let err = Checkpoint::load(&missing).unwrap_err().to_string();
    assert!(err.contains("nope.ckpt"), "{err}");
}

#[test]
fn applying_to_a_different_plan_is_refused() {
    let s = adapter_store();
    let ck = Checkpoint::from_store(&s, |sl| sl.group == Group::Adapter, [0; 32], [0; 32]);
    // same names, wider bottleneck
    let a = AdaptationConfig {
        bottleneck: 3,
        ..AdaptationConfig::default()
    };
    let (_, mut other) = store::<f32>(&tiny_backbone(), &a, 3);
    assert!(ck.apply_to(&mut other).is_err());
    // no adapters at all
    let (_, mut plain) = store::<f32>(&tiny_backbone(), &AdaptationConfig::plain(Variant::None, 2), 3);
    assert!(ck.apply_to(&mut plain).is_err());
    // the matching plan accepts it and gets the values
    let (_, mut same) = store::<f32>(&tiny_backbone(), &AdaptationConfig { bottleneck: 2, ..AdaptationConfig::default() }, 9);
    ck.apply_to(&mut same).unwrap();
    assert_eq!(same.digest(Group::Adapter), s.digest(Group::Adapter));
}

fn tiny_world() -> WorldSpec {
    WorldSpec {
        sizes: SplitSizes {
            pretrain: 64,
            downstream: 48,
            test: 20,
        },
        ..WorldSpec::preset(DataKind::Image)
    }
}

fn tiny_run(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone.hidden = 16;
    cfg.backbone.heads = 2;
    for d in [
        &mut cfg.backbone.visual_depth,
        &mut cfg.backbone.text_depth,
        &mut cfg.backbone.fusion_depth,
        &mut cfg.backbone.decoder_depth,
    ] {
        *d = 1;
    }
    cfg.task.epochs = 1;
    cfg.task.batch_size = 16;
    cfg.adaptation = match variant {
        Variant::UniAdapter => AdaptationConfig::default(),
        v => AdaptationConfig::plain(v, 4),
    };
    cfg.adaptation.bottleneck = 4;
    cfg
}

#[test]
fn commands_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let world = tiny_world();
    cmd_gen_data(&world, &p("data")).unwrap();
    let pre_cfg = tiny_run(Variant::FullFinetune);
    cmd_pretrain(&pre_cfg, &p("data"), &p("backbone.ckpt"), Some(&p("pre.csv"))).unwrap();
    assert_eq!(read_csv(&p("pre.csv")).unwrap().len(), 4);

    let cfg = tiny_run(Variant::UniAdapter);
    let adapted = cmd_adapt(&cfg, &p("backbone.ckpt"), &p("data"), &p("uni.ckpt"), Some(&p("m.csv"))).unwrap();
    assert_eq!(adapted.backbone_before, adapted.backbone_after);
    let ck = Checkpoint::load(&p("uni.ckpt")).unwrap();
    assert!(!ck.has_backbone());
    assert!(ck.entries.iter().any(|e| e.name.starts_with("adapter.")));
    assert_eq!(ck.backbone_hash, adapted.backbone_before);

    let rec = cmd_eval(&cfg, &p("uni.ckpt"), Some(&p("backbone.ckpt")), &p("data"), Split::Test, Some(&p("m.csv"))).unwrap();
    let ds = Dataset::open(&p("data"), Some(&world)).unwrap();
    let test = ds.load_split(Split::Test).unwrap();
    let model = Model::new(cfg.backbone.clone(), cfg.adaptation.clone());
    let mut want = evaluate(&cfg, &model, &adapted.trainer.store, &test).unwrap();
    want.split = "test".into();
    assert_eq!(rec, want);
    let logged = read_csv(&p("m.csv")).unwrap();
    assert_eq!(logged.last(), Some(&rec));

    // no backbone, wrong config, wrong backbone
    assert!(cmd_eval(&cfg, &p("uni.ckpt"), None, &p("data"), Split::Test, None).is_err());
    let other = tiny_run(Variant::SequentialAdapter);
    assert!(cmd_eval(&other, &p("uni.ckpt"), Some(&p("backbone.ckpt")), &p("data"), Split::Test, None).is_err());
    let mut reseeded = pre_cfg.clone();
    reseeded.task.seed += 1;
    reseeded.task.max_steps = 1;
    cmd_pretrain(&reseeded, &p("data"), &p("other.ckpt"), None).unwrap();
    let err = cmd_eval(&cfg, &p("uni.ckpt"), Some(&p("other.ckpt")), &p("data"), Split::Test, None).unwrap_err();
    assert!(err.to_string().contains("backbone hash"), "{err}");

    // a full fine-tune carries its backbone and evaluates on its own
    let full = tiny_run(Variant::FullFinetune);
    let ff = cmd_adapt(&full, &p("backbone.ckpt"), &p("data"), &p("ff.ckpt"), None).unwrap();
    assert_ne!(ff.backbone_before, ff.backbone_after);
    assert!(Checkpoint::load(&p("ff.ckpt")).unwrap().has_backbone());
    cmd_eval(&full, &p("ff.ckpt"), None, &p("data"), Split::Test, None).unwrap();
}

#[test]
fn tampered_backbone_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    cmd_gen_data(&tiny_world(), &p("data")).unwrap();
    let mut cfg = tiny_run(Variant::FullFinetune);
    cfg.task.max_steps = 1;
    cmd_pretrain(&cfg, &p("data"), &p("b.ckpt"), None).unwrap();
    let mut ck = Checkpoint::load(&p("b.ckpt")).unwrap();
    let e = ck.entries.iter_mut().find(|e| e.name.starts_with("visual.")).unwrap();
    e.data[0] += 1.0;
    ck.save(&p("b.ckpt")).unwrap();
    let cfg = tiny_run(Variant::UniAdapter);
    let Err(err) = cmd_adapt(&cfg, &p("b.ckpt"), &p("data"), &p("u.ckpt"), None) else {
        panic!("tampered backbone accepted");
    };
    assert!(err.to_string().contains("backbone"), "{err}");
}
