//! Parameter plans: the full list of named tensors a configuration needs,
//! their aliasing, initialisation and trainable flags, built without
//! allocating any tensor data. Counting and auditing operate on plans, so
//! base-size layouts can be checked without materialising them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use uniadapter_tensor::{Real, Tensor};

use crate::config::{AdaptationConfig, BackboneConfig, Encoder, Modality, Variant};
use crate::error::Result;
use crate::store::{Group, ParameterStore};

/// Standard deviation of the normal initialiser for backbone weights.
pub const BACKBONE_INIT_STD: f64 = 0.02;
/// Initial contrastive temperature.
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std `sqrt(2 / fan_in)`, fan-in being the leading extent.
    KaimingNormal,
    /// Square identity matrix.
    Identity,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterPlan {
    /// Canonical tensors, in registration order.
    pub specs: Vec<ParamSpec>,
    /// `(alias, canonical)` pairs, in registration order.
    pub aliases: Vec<(String, String)>,
}

/// Name of an adapter projection, e.g. `adapter.text.3.down`.
pub fn adapter_name(encoder: Encoder, layer: usize, part: &str) -> String {
    format!("adapter.{}.{layer}.{part}", encoder.name())
}

/// Name of a low-rank factor, e.g. `lora.visual.0.q.a`.
pub fn lora_name(encoder: Encoder, layer: usize, proj: char, factor: char) -> String {
    format!("lora.{}.{layer}.{proj}.{factor}", encoder.name())
}

impl ParameterPlan {
    fn push(&mut self, name: String, shape: &[usize], group: Group, init: Init) {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            group,
            init,
            trainable: false,
        });
    }

    fn alias(&mut self, alias: String, canonical: String) {
        self.aliases.push((alias, canonical));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.specs.iter().any(|s| s.name == name) || self.aliases.iter().any(|(a, _)| a == name)
    }

    pub fn set_group_trainable(&mut self, group: Group, on: bool) {
        for s in self.specs.iter_mut().filter(|s| s.group == group) {
            s.trainable = on;
        }
    }

    /// Allocates and initialises every tensor. Each tensor draws from its
    /// own ChaCha8 stream keyed by `(seed, name)`, so values do not depend
    /// on registration order.
    pub fn materialize<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        for spec in &self.specs {
            let tensor = init_tensor(spec, seed);
            store.insert(&spec.name, spec.group, tensor)?;
            store.set_trainable(&spec.name, spec.trainable)?;
        }
        for (alias, canonical) in &self.aliases {
            store.alias(alias, canonical)?;
        }
        Ok(store)
    }

    /// Exact count of trainable scalars with breakdowns; aliases add nothing.
    pub fn count_tunable(&self) -> CountReport {
        CountReport::from_entries(
            self.specs
                .iter()
                .filter(|s| s.trainable)
                .map(|s| (s.name.as_str(), s.group, s.numel())),
        )
    }

    /// Deterministic text listing: one line per name with shape, canonical
    /// or alias target, group and trainable flag.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for s in &self.specs {
            let _ = writeln!(
                out,
                "{}\t{:?}\tcanonical\t{}\t{}",
                s.name,
                s.shape,
                s.group.as_str(),
                if s.trainable { "trainable" } else { "frozen" }
            );
        }
        for (a, c) in &self.aliases {
            let spec = self.specs.iter().find(|s| &s.name == c).expect("alias target exists");
            let _ = writeln!(
                out,
                "{a}\t{:?}\talias-of {c}\t{}\t{}",
                spec.shape,
                spec.group.as_str(),
                if spec.trainable { "trainable" } else { "frozen" }
            );
        }
        out
    }
}

fn init_tensor<T: Real>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::ones(&spec.shape),
        Init::Const(c) => Tensor::full(&spec.shape, T::of(c)),
        Init::Identity => {
            let n = spec.shape[0];
            let mut t = Tensor::zeros(&spec.shape);
            for i in 0..n.min(spec.shape[1]) {
                t.data_mut()[i * spec.shape[1] + i] = T::one();
            }
            t
        }
        Init::Normal(std) => Tensor::randn(&spec.shape, std, &mut name_rng(seed, &spec.name)),
        Init::KaimingNormal => {
            let std = (2.0 / spec.shape[0] as f64).sqrt();
            Tensor::randn(&spec.shape, std, &mut name_rng(seed, &spec.name))
        }
    }
}

fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let h: [u8; 32] = Sha256::digest(name.as_bytes()).into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(h[..8].try_into().unwrap()));
    rng
}

fn block_specs(plan: &mut ParameterPlan, b: &BackboneConfig, enc: Encoder, layer: usize) {
    let d = b.hidden;
    let f = b.ffn_hidden();
    let p = |part: &str| format!("{}.{layer}.{part}", enc.name());
    let normal = Init::Normal(BACKBONE_INIT_STD);
    let g = Group::Backbone;
    let ln = |plan: &mut ParameterPlan, tag: &str| {
        plan.push(p(&format!("{tag}.g")), &[d], g, Init::Ones);
        plan.push(p(&format!("{tag}.b")), &[d], g, Init::Zeros);
    };
    let attn = |plan: &mut ParameterPlan, tag: &str| {
        for w in ["q", "k", "v", "o"] {
            plan.push(p(&format!("{tag}.w{w}")), &[d, d], g, normal);
            plan.push(p(&format!("{tag}.b{w}")), &[d], g, Init::Zeros);
        }
    };
    ln(plan, "ln1");
    attn(plan, "attn");
    if matches!(enc, Encoder::Fusion | Encoder::Decoder) {
        ln(plan, "ln_x");
        attn(plan, "xattn");
    }
    ln(plan, "ln2");
    plan.push(p("ffn.w1"), &[d, f], g, normal);
    plan.push(p("ffn.b1"), &[f], g, Init::Zeros);
    plan.push(p("ffn.w2"), &[f, d], g, normal);
    plan.push(p("ffn.b2"), &[d], g, Init::Zeros);
}

/// Backbone and task-head tensors only, everything frozen.
pub fn backbone_plan(b: &BackboneConfig) -> ParameterPlan {
    let mut plan = ParameterPlan::default();
    let d = b.hidden;
    let normal = Init::Normal(BACKBONE_INIT_STD);
    let g = Group::Backbone;

    plan.push("visual.patch_embed.w".into(), &[b.patch_dim, d], g, normal);
    plan.push("visual.patch_embed.b".into(), &[d], g, Init::Zeros);
    plan.push("visual.cls".into(), &[1, d], g, normal);
    plan.push("visual.pos".into(), &[b.patches + 1, d], g, normal);
    plan.push("text.tok_embed".into(), &[b.vocab, d], g, normal);
    plan.push("text.cls".into(), &[1, d], g, normal);
    plan.push("text.pos".into(), &[b.max_text_len + 1, d], g, normal);
    plan.push("decoder.tok_embed".into(), &[b.vocab, d], g, normal);
    plan.push("decoder.pos".into(), &[b.max_text_len + 1, d], g, normal);
    for enc in [Encoder::Visual, Encoder::Text, Encoder::Fusion, Encoder::Decoder] {
        for layer in 0..b.depth(enc) {
            block_specs(&mut plan, b, enc, layer);
        }
        plan.push(format!("{}.ln_f.g", enc.name()), &[d], g, Init::Ones);
        plan.push(format!("{}.ln_f.b", enc.name()), &[d], g, Init::Zeros);
    }

    let h = Group::Head;
    plan.push("head.vision_proj".into(), &[d, d], h, Init::Identity);
    plan.push("head.text_proj".into(), &[d, d], h, Init::Identity);
    plan.push("head.itm.w".into(), &[d, 1], h, normal);
    plan.push("head.itm.b".into(), &[1], h, Init::Zeros);
    plan.push("head.temp".into(), &[1], h, Init::Const(INIT_TEMPERATURE));
    plan.push("head.lm.w".into(), &[d, b.vocab], h, normal);
    plan.push("head.lm.b".into(), &[b.vocab], h, Init::Zeros);
    plan
}

/// Whether encoder `enc` carries an adapter unit at `layer`.
pub fn has_unit(b: &BackboneConfig, a: &AdaptationConfig, enc: Encoder, layer: usize) -> bool {
    a.variant.uses_adapters()
        && a.modalities.contains(enc.modality())
        && layer < b.depth(enc)
        && a.layers(enc).contains(layer)
        && (enc != Encoder::Decoder || a.adapt_decoder)
        && (enc != Encoder::Decoder
            || !a.share_encoder_decoder
            || has_unit(b, a, Encoder::Fusion, layer))
}

/// Full plan: backbone, heads and the adaptation tensors of `a`, with
/// trainable flags set for the variant.
pub fn build_parameter_plan(b: &BackboneConfig, a: &AdaptationConfig) -> Result<ParameterPlan> {
    b.validate()?;
    a.validate(b)?;
    let mut plan = backbone_plan(b);
    let (d, r) = (b.hidden, a.bottleneck);
    let ad = Group::Adapter;

    if a.variant.uses_adapters() {
        let max_depth = b.visual_depth.max(b.text_depth).max(b.fusion_depth);
        for layer in 0..max_depth {
            let members: Vec<Modality> = Modality::ALL
                .into_iter()
                .filter(|&m| has_unit(b, a, Encoder::of_modality(m), layer))
                .collect();
            let owner = if members.contains(&Modality::Text) {
                Some(Modality::Text)
            } else {
                members.first().copied()
            };
            let share = a.variant == Variant::UniAdapter;
            for &m in &members {
                let enc = Encoder::of_modality(m);
                let is_owner = Some(m) == owner;
                let owner_enc = Encoder::of_modality(owner.unwrap_or(m));
                for (part, shape, init, shared) in [
                    ("down", [d, r], Init::KaimingNormal, share && a.sharing.shares_down()),
                    ("up", [r, d], Init::Zeros, share && a.sharing.shares_up()),
                ] {
                    let name = adapter_name(enc, layer, part);
                    if shared && !is_owner {
                        plan.alias(name, adapter_name(owner_enc, layer, part));
                    } else {
                        plan.push(name, &shape, ad, init);
                    }
                }
            }
        }
        for layer in 0..b.decoder_depth {
            if !has_unit(b, a, Encoder::Decoder, layer) {
                continue;
            }
            for (part, shape, init) in [
                ("down", [d, r], Init::KaimingNormal),
                ("up", [r, d], Init::Zeros),
            ] {
                let name = adapter_name(Encoder::Decoder, layer, part);
                if a.share_encoder_decoder {
                    plan.alias(name, adapter_name(Encoder::Fusion, layer, part));
                } else {
                    plan.push(name, &shape, ad, init);
                }
            }
        }
    }

    if a.variant == Variant::Lora {
        for m in a.modalities.iter() {
            let enc = Encoder::of_modality(m);
            for layer in (0..b.depth(enc)).filter(|&l| a.layers(enc).contains(l)) {
                for proj in ['q', 'v'] {
                    plan.push(lora_name(enc, layer, proj, 'a'), &[d, a.lora_rank], ad, Init::KaimingNormal);
                    plan.push(lora_name(enc, layer, proj, 'b'), &[a.lora_rank, d], ad, Init::Zeros);
                }
            }
        }
    }

    match a.variant {
        Variant::None => {}
        Variant::LinearProbe => plan.set_group_trainable(Group::Head, true),
        Variant::FullFinetune => {
            plan.set_group_trainable(Group::Backbone, true);
            plan.set_group_trainable(Group::Head, true);
        }
        _ => plan.set_group_trainable(Group::Adapter, true),
    }
    Ok(plan)
}

/// Count of trainable scalars with per-group, per-encoder, per-modality and
/// per-layer breakdowns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CountReport {
    pub total: usize,
    pub by_group: BTreeMap<&'static str, usize>,
    pub by_encoder: BTreeMap<String, usize>,
    pub by_modality: BTreeMap<char, usize>,
    pub by_layer: BTreeMap<(String, usize), usize>,
}

/// Encoder and layer a parameter name belongs to, when it names one.
fn locate(name: &str) -> (Option<&str>, Option<usize>) {
    let mut parts = name.split('.');
    let first = parts.next();
    let (enc, rest) = match first {
        Some("adapter") | Some("lora") => (parts.next(), parts.next()),
        Some(e @ ("visual" | "text" | "fusion" | "decoder")) => (Some(e), parts.next()),
        _ => (None, None),
    };
    (enc, rest.and_then(|l| l.parse().ok()))
}

impl CountReport {
    pub fn from_entries<'a>(entries: impl Iterator<Item = (&'a str, Group, usize)>) -> Self {
        let mut rep = CountReport::default();
        for (name, group, n) in entries {
            rep.total += n;
            *rep.by_group.entry(group.as_str()).or_default() += n;
            let (enc, layer) = locate(name);
            if let Some(enc) = enc {
                *rep.by_encoder.entry(enc.to_string()).or_default() += n;
                let m = match enc {
                    "visual" => 'V',
                    "text" => 'T',
                    _ => 'C',
                };
                *rep.by_modality.entry(m).or_default() += n;
                if let Some(l) = layer {
                    *rep.by_layer.entry((enc.to_string(), l)).or_default() += n;
                }
            }
        }
        rep
    }

    pub fn from_store<T: Real>(store: &ParameterStore<T>) -> Self {
        Self::from_entries(
            store
                .slots()
                .iter()
                .filter(|s| s.trainable)
                .map(|s| (s.name.as_str(), s.group, s.tensor.numel())),
        )
    }

    /// `"18874368 (19.0M)"` followed by the breakdown lines.
    pub fn render(&self) -> String {
        let mut out = format!("{} ({})\n", self.total, format_millions(self.total));
        for (g, n) in &self.by_group {
            let _ = writeln!(out, "  group {g}: {n}");
        }
        for (e, n) in &self.by_encoder {
            let _ = writeln!(out, "  encoder {e}: {n}");
        }
        for (m, n) in &self.by_modality {
            let _ = writeln!(out, "  modality {m}: {n}");
        }
        for ((e, l), n) in &self.by_layer {
            let _ = writeln!(out, "  layer {e}.{}: {n}", l + 1);
        }
        out
    }
}

/// Millions to one decimal, rounded up (`4718592` → `"4.8M"`).
pub fn format_millions(n: usize) -> String {
    let tenths = n.div_ceil(100_000);
    format!("{}.{}M", tenths / 10, tenths % 10)
}
