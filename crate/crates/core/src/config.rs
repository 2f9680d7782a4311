//! Run configuration and its sectioned key–value text format.
//!
//! Grammar (one item per line):
//!
//! ```text
//! file    := (blank | comment | section | entry)*
//! comment := '#' any*
//! section := '[' ("backbone" | "adaptation" | "optimizer" | "task") ']'
//! entry   := key '=' value          (only after a section header)
//! ```
//!
//! Keys are section-specific; an unknown section or key is an error. Layer
//! sets are written 1-based and inclusive (`all`, `5-12`, `1-4,9-12`).

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Text,
    Cross,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Text, Modality::Cross];

    pub fn letter(self) -> char {
        match self {
            Modality::Visual => 'V',
            Modality::Text => 'T',
            Modality::Cross => 'C',
        }
    }
}

/// Subset of {V, T, C}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ModalitySet {
    pub visual: bool,
    pub text: bool,
    pub cross: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet {
        visual: true,
        text: true,
        cross: true,
    };

    pub fn only(m: Modality) -> Self {
        let mut s = Self::default();
        s.set(m, true);
        s
    }

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Visual => self.visual,
            Modality::Text => self.text,
            Modality::Cross => self.cross,
        }
    }

    pub fn set(&mut self, m: Modality, on: bool) {
        match m {
            Modality::Visual => self.visual = on,
            Modality::Text => self.text = on,
            Modality::Cross => self.cross = on,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.contains(*m))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FromStr for ModalitySet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut out = ModalitySet::default();
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(out);
        }
        for part in s.split(',').map(str::trim) {
            let m = match part {
                "V" | "v" => Modality::Visual,
                "T" | "t" => Modality::Text,
                "C" | "c" => Modality::Cross,
                other => return Err(format!("unknown modality `{other}` (expected V, T or C)")),
            };
            out.set(m, true);
        }
        Ok(out)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let letters: Vec<String> = self.iter().map(|m| m.letter().to_string()).collect();
        f.write_str(&letters.join(","))
    }
}

/// Layers that receive adaptation. Stored zero-based; written one-based.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum LayerSet {
    #[default]
    All,
    Only(BTreeSet<usize>),
}

impl LayerSet {
    /// Inclusive one-based range, e.g. `one_based(5, 12)` for layers 5–12.
    pub fn one_based(first: usize, last: usize) -> Self {
        LayerSet::Only((first - 1..last).collect())
    }

    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerSet::All => true,
            LayerSet::Only(s) => s.contains(&layer),
        }
    }

    fn check(&self, depth: usize, what: &str) -> Result<()> {
        if let LayerSet::Only(s) = self {
            if let Some(&bad) = s.iter().find(|&&l| l >= depth) {
                return config_err(format!(
                    "{what} layer {} out of range for depth {depth}",
                    bad + 1
                ));
            }
        }
        Ok(())
    }
}

impl FromStr for LayerSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "all" {
            return Ok(LayerSet::All);
        }
        let mut set = BTreeSet::new();
        if s == "none" {
            return Ok(LayerSet::Only(set));
        }
        for part in s.split(',').map(str::trim) {
            let (a, b) = match part.split_once('-') {
                Some((a, b)) => (a.trim(), b.trim()),
                None => (part, part),
            };
            let a: usize = a.parse().map_err(|_| format!("bad layer `{a}`"))?;
            let b: usize = b.parse().map_err(|_| format!("bad layer `{b}`"))?;
            if a == 0 || b < a {
                return Err(format!("bad layer range `{part}` (layers are 1-based)"));
            }
            set.extend(a - 1..b);
        }
        Ok(LayerSet::Only(set))
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let LayerSet::Only(set) = self else {
            return f.write_str("all");
        };
        if set.is_empty() {
            return f.write_str("none");
        }
        // collapse runs
        let mut parts = Vec::new();
        let mut it = set.iter().copied().peekable();
        while let Some(start) = it.next() {
            let mut end = start;
            while it.peek() == Some(&(end + 1)) {
                end = it.next().unwrap();
            }
            if start == end {
                parts.push(format!("{}", start + 1));
            } else {
                parts.push(format!("{}-{}", start + 1, end + 1));
            }
        }
        f.write_str(&parts.join(","))
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name), other, [$($text),+].join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(
    /// Adaptation method.
    Variant {
        None => "none",
        LinearProbe => "linear_probe",
        FullFinetune => "full_finetune",
        SequentialAdapter => "sequential_adapter",
        ParallelAdapter => "parallel_adapter",
        Lora => "lora",
        UniAdapter => "uniadapter",
    }
);

impl Variant {
    /// Variants that insert bottleneck adapters.
    pub fn uses_adapters(self) -> bool {
        matches!(
            self,
            Variant::SequentialAdapter | Variant::ParallelAdapter | Variant::UniAdapter
        )
    }
}

string_enum!(
    /// Which adapter projections are aliased across modalities at a layer.
    Sharing {
        NoShare => "no_share",
        ShareDown => "share_down",
        ShareUp => "share_up",
        ShareBoth => "share_both",
    }
);

impl Sharing {
    pub fn shares_down(self) -> bool {
        matches!(self, Sharing::ShareDown | Sharing::ShareBoth)
    }

    pub fn shares_up(self) -> bool {
        matches!(self, Sharing::ShareUp | Sharing::ShareBoth)
    }
}

string_enum!(
    /// Bottleneck nonlinearity.
    Activation {
        Relu => "relu",
        Gelu => "gelu",
    }
);

string_enum!(
    /// How the query-residual adapter enters the multimodal block output.
    ///
    /// `verbatim` adds the full residual adapter `q + s·σ(qW)W`, so the block
    /// carries `q` a second time; `delta` adds only `s·σ(qW)W`.
    QueryForm {
        Delta => "delta",
        Verbatim => "verbatim",
    }
);

string_enum!(
    TaskKind {
        RetrievalImage => "retrieval-image",
        RetrievalVideo => "retrieval-video",
        Vqa => "vqa",
    }
);

/// Shape of the frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub heads: usize,
    pub visual_depth: usize,
    pub text_depth: usize,
    pub fusion_depth: usize,
    pub decoder_depth: usize,
    /// Patch rows per image (before the CLS row).
    pub patches: usize,
    /// Width of each raw patch feature row.
    pub patch_dim: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub ffn_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            visual_depth: 4,
            text_depth: 4,
            fusion_depth: 4,
            decoder_depth: 2,
            patches: 4,
            patch_dim: 16,
            vocab: 64,
            max_text_len: 16,
            ffn_mult: 4,
        }
    }
}

impl BackboneConfig {
    /// Base-size dimensions used for parameter-count audits (never trained).
    pub fn base_audit() -> Self {
        Self {
            hidden: 768,
            heads: 12,
            visual_depth: 12,
            text_depth: 12,
            fusion_depth: 12,
            decoder_depth: 12,
            patches: 196,
            patch_dim: 768,
            vocab: 30524,
            max_text_len: 35,
            ffn_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return config_err(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        for (name, d) in [
            ("visual_depth", self.visual_depth),
            ("text_depth", self.text_depth),
            ("fusion_depth", self.fusion_depth),
            ("decoder_depth", self.decoder_depth),
        ] {
            if d == 0 {
                return config_err(format!("{name} must be at least 1"));
            }
        }
        if self.patches == 0 || self.patch_dim == 0 || self.vocab == 0 || self.ffn_mult == 0 {
            return config_err("patches, patch_dim, vocab and ffn_mult must be positive");
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    pub fn depth(&self, encoder: Encoder) -> usize {
        match encoder {
            Encoder::Visual => self.visual_depth,
            Encoder::Text => self.text_depth,
            Encoder::Fusion => self.fusion_depth,
            Encoder::Decoder => self.decoder_depth,
        }
    }
}

/// The four transformer stacks of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Encoder {
    Visual,
    Text,
    Fusion,
    Decoder,
}

impl Encoder {
    pub fn name(self) -> &'static str {
        match self {
            Encoder::Visual => "visual",
            Encoder::Text => "text",
            Encoder::Fusion => "fusion",
            Encoder::Decoder => "decoder",
        }
    }

    /// Modality whose adapters live in this encoder.
    pub fn modality(self) -> Modality {
        match self {
            Encoder::Visual => Modality::Visual,
            Encoder::Text => Modality::Text,
            Encoder::Fusion | Encoder::Decoder => Modality::Cross,
        }
    }

    pub fn of_modality(m: Modality) -> Self {
        match m {
            Modality::Visual => Encoder::Visual,
            Modality::Text => Encoder::Text,
            Modality::Cross => Encoder::Fusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationConfig {
    pub variant: Variant,
    pub bottleneck: usize,
    pub scale: f64,
    pub sharing: Sharing,
    pub modalities: ModalitySet,
    pub visual_layers: LayerSet,
    pub text_layers: LayerSet,
    pub fusion_layers: LayerSet,
    pub query_residual: bool,
    pub query_form: QueryForm,
    pub pfa: bool,
    pub pfa_normalize: bool,
    pub pfa_stop_grad: bool,
    /// Insert adapters into the answer decoder as well.
    pub adapt_decoder: bool,
    pub share_encoder_decoder: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub activation: Activation,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            variant: Variant::UniAdapter,
            bottleneck: 16,
            scale: 0.1,
            sharing: Sharing::ShareDown,
            modalities: ModalitySet::ALL,
            visual_layers: LayerSet::All,
            text_layers: LayerSet::All,
            fusion_layers: LayerSet::All,
            query_residual: true,
            query_form: QueryForm::Delta,
            pfa: true,
            pfa_normalize: false,
            pfa_stop_grad: false,
            adapt_decoder: false,
            share_encoder_decoder: false,
            lora_rank: 4,
            lora_alpha: 4.0,
            activation: Activation::Relu,
        }
    }
}

impl AdaptationConfig {
    /// Plain configuration for `variant` with no query residual, PFA or sharing.
    pub fn plain(variant: Variant, bottleneck: usize) -> Self {
        Self {
            variant,
            bottleneck,
            sharing: Sharing::NoShare,
            query_residual: false,
            pfa: false,
            ..Self::default()
        }
    }

    pub fn layers(&self, encoder: Encoder) -> &LayerSet {
        match encoder {
            Encoder::Visual => &self.visual_layers,
            Encoder::Text => &self.text_layers,
            Encoder::Fusion | Encoder::Decoder => &self.fusion_layers,
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.bottleneck == 0 {
            return config_err("bottleneck must be at least 1");
        }
        if !self.scale.is_finite() {
            return config_err("scale must be finite");
        }
        if self.lora_rank == 0 {
            return config_err("lora_rank must be at least 1");
        }
        if !self.lora_alpha.is_finite() {
            return config_err("lora_alpha must be finite");
        }
        self.visual_layers.check(backbone.visual_depth, "visual")?;
        self.text_layers.check(backbone.text_depth, "text")?;
        self.fusion_layers.check(backbone.fusion_depth, "fusion")?;
        if self.sharing != Sharing::NoShare && self.variant != Variant::UniAdapter {
            return config_err(format!(
                "sharing `{}` only applies to the uniadapter variant",
                self.sharing
            ));
        }
        if self.variant.uses_adapters() && self.query_residual {
            if !self.modalities.text {
                return config_err("query_residual needs the textual modality (T) enabled");
            }
            if !self.modalities.cross {
                return config_err("query_residual needs the cross modality (C) enabled");
            }
        }
        if self.share_encoder_decoder {
            if !self.adapt_decoder {
                return config_err("share_encoder_decoder requires adapt_decoder = true");
            }
            if backbone.decoder_depth > backbone.fusion_depth {
                return config_err("share_encoder_decoder needs decoder_depth <= fusion_depth");
            }
        }
        if self.adapt_decoder && !self.modalities.cross {
            return config_err("adapt_decoder needs the cross modality (C) enabled");
        }
        if self.variant.uses_adapters() && self.bottleneck > backbone.hidden {
            log::warn!(
                "bottleneck {} exceeds hidden size {}: over-complete adapter",
                self.bottleneck,
                backbone.hidden
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub train_frames: usize,
    pub infer_frames: usize,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::RetrievalImage,
            batch_size: 32,
            epochs: 5,
            max_steps: 0,
            train_frames: 8,
            infer_frames: 16,
            seed: 42,
            data: None,
            checkpoints: None,
            metrics: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adaptation: AdaptationConfig,
    pub optimizer: OptimizerConfig,
    pub task: TaskConfig,
}

fn parse_val<V: FromStr>(key: &str, raw: &str) -> std::result::Result<V, String>
where
    V::Err: fmt::Display,
{
    raw.parse::<V>()
        .map_err(|e| format!("invalid value `{raw}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("invalid value `{raw}` for `{key}`: expected true or false")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "backbone" | "adaptation" | "optimizer" | "task") {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| at(format!("`{key}` appears before any section header")))?;
            cfg.set(sec, key, value).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adaptation.validate(&self.backbone)?;
        if !(self.optimizer.lr > 0.0) {
            return config_err("lr must be positive");
        }
        if self.task.epochs == 0 {
            return config_err("epochs must be at least 1");
        }
        if self.task.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if self.task.train_frames == 0 || self.task.infer_frames == 0 {
            return config_err("frame counts must be at least 1");
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let unknown = || Err(format!("unknown key `{key}` in [{section}]"));
        match section {
            "backbone" => {
                let b = &mut self.backbone;
                let slot = match key {
                    "hidden" => &mut b.hidden,
                    "heads" => &mut b.heads,
                    "visual_depth" => &mut b.visual_depth,
                    "text_depth" => &mut b.text_depth,
                    "fusion_depth" => &mut b.fusion_depth,
                    "decoder_depth" => &mut b.decoder_depth,
                    "patches" => &mut b.patches,
                    "patch_dim" => &mut b.patch_dim,
                    "vocab" => &mut b.vocab,
                    "max_text_len" => &mut b.max_text_len,
                    "ffn_mult" => &mut b.ffn_mult,
                    _ => return unknown(),
                };
                *slot = parse_val(key, v)?;
            }
            "adaptation" => {
                let a = &mut self.adaptation;
                match key {
                    "variant" => a.variant = parse_val(key, v)?,
                    "bottleneck" => a.bottleneck = parse_val(key, v)?,
                    "scale" => a.scale = parse_val(key, v)?,
                    "sharing" => a.sharing = parse_val(key, v)?,
                    "modalities" => a.modalities = parse_val(key, v)?,
                    "layers" => {
                        let set: LayerSet = parse_val(key, v)?;
                        a.visual_layers = set.clone();
                        a.text_layers = set.clone();
                        a.fusion_layers = set;
                    }
                    "visual_layers" => a.visual_layers = parse_val(key, v)?,
                    "text_layers" => a.text_layers = parse_val(key, v)?,
                    "fusion_layers" => a.fusion_layers = parse_val(key, v)?,
                    "query_residual" => a.query_residual = parse_bool(key, v)?,
                    "query_form" => a.query_form = parse_val(key, v)?,
                    "pfa" => a.pfa = parse_bool(key, v)?,
                    "pfa_normalize" => a.pfa_normalize = parse_bool(key, v)?,
                    "pfa_stop_grad" => a.pfa_stop_grad = parse_bool(key, v)?,
                    "adapt_decoder" => a.adapt_decoder = parse_bool(key, v)?,
                    "share_encoder_decoder" => a.share_encoder_decoder = parse_bool(key, v)?,
                    "lora_rank" => a.lora_rank = parse_val(key, v)?,
                    "lora_alpha" => a.lora_alpha = parse_val(key, v)?,
                    "activation" => a.activation = parse_val(key, v)?,
                    _ => return unknown(),
                }
            }
            "optimizer" => {
                let o = &mut self.optimizer;
                let slot = match key {
                    "lr" => &mut o.lr,
                    "beta1" => &mut o.beta1,
                    "beta2" => &mut o.beta2,
                    "eps" => &mut o.eps,
                    "weight_decay" => &mut o.weight_decay,
                    _ => return unknown(),
                };
                *slot = parse_val(key, v)?;
            }
            "task" => {
                let t = &mut self.task;
                match key {
                    "kind" => t.kind = parse_val(key, v)?,
                    "batch_size" => t.batch_size = parse_val(key, v)?,
                    "epochs" => t.epochs = parse_val(key, v)?,
                    "max_steps" => t.max_steps = parse_val(key, v)?,
                    "train_frames" => t.train_frames = parse_val(key, v)?,
                    "infer_frames" => t.infer_frames = parse_val(key, v)?,
                    "seed" => t.seed = parse_val(key, v)?,
                    "data" => t.data = Some(PathBuf::from(v)),
                    "checkpoints" => t.checkpoints = Some(PathBuf::from(v)),
                    "metrics" => t.metrics = Some(PathBuf::from(v)),
                    _ => return unknown(),
                }
            }
            _ => unreachable!("section validated by caller"),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.backbone_section());
        s.push('\n');
        s.push_str(&self.adaptation_section());
        let o = &self.optimizer;
        let _ = write!(
            s,
            "\n[optimizer]\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\n",
            o.lr, o.beta1, o.beta2, o.eps, o.weight_decay
        );
        let t = &self.task;
        let _ = write!(
            s,
            "\n[task]\nkind = {}\nbatch_size = {}\nepochs = {}\nmax_steps = {}\ntrain_frames = {}\ninfer_frames = {}\nseed = {}\n",
            t.kind, t.batch_size, t.epochs, t.max_steps, t.train_frames, t.infer_frames, t.seed
        );
        for (k, p) in [("data", &t.data), ("checkpoints", &t.checkpoints), ("metrics", &t.metrics)] {
            if let Some(p) = p {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        s
    }

    fn backbone_section(&self) -> String {
        let b = &self.backbone;
        format!(
            "[backbone]\nhidden = {}\nheads = {}\nvisual_depth = {}\ntext_depth = {}\nfusion_depth = {}\ndecoder_depth = {}\npatches = {}\npatch_dim = {}\nvocab = {}\nmax_text_len = {}\nffn_mult = {}\n",
            b.hidden, b.heads, b.visual_depth, b.text_depth, b.fusion_depth, b.decoder_depth,
            b.patches, b.patch_dim, b.vocab, b.max_text_len, b.ffn_mult
        )
    }

    fn adaptation_section(&self) -> String {
        let a = &self.adaptation;
        format!(
            "[adaptation]\nvariant = {}\nbottleneck = {}\nscale = {}\nsharing = {}\nmodalities = {}\nvisual_layers = {}\ntext_layers = {}\nfusion_layers = {}\nquery_residual = {}\nquery_form = {}\npfa = {}\npfa_normalize = {}\npfa_stop_grad = {}\nadapt_decoder = {}\nshare_encoder_decoder = {}\nlora_rank = {}\nlora_alpha = {}\nactivation = {}\n",
            a.variant, a.bottleneck, a.scale, a.sharing, a.modalities, a.visual_layers,
            a.text_layers, a.fusion_layers, a.query_residual, a.query_form, a.pfa,
            a.pfa_normalize, a.pfa_stop_grad, a.adapt_decoder, a.share_encoder_decoder,
            a.lora_rank, a.lora_alpha, a.activation
        )
    }

    /// Digest of everything that determines the parameter layout and task:
    /// backbone shape, adaptation plan and task kind.
    pub fn model_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.backbone_section().as_bytes());
        h.update(self.adaptation_section().as_bytes());
        h.update(self.task.kind.as_str().as_bytes());
        h.finalize().into()
    }

    /// Digest of the backbone shape alone.
    pub fn backbone_hash(&self) -> [u8; 32] {
        Sha256::digest(self.backbone_section().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_sets_parse_one_based() {
        let s: LayerSet = "5-12".parse().unwrap();
        assert!(!s.contains(3) && s.contains(4) && s.contains(11));
        assert_eq!(s, LayerSet::one_based(5, 12));
        assert_eq!(s.to_string(), "5-12");
        let s: LayerSet = "1-4,9-12".parse().unwrap();
        assert_eq!(s.to_string(), "1-4,9-12");
        assert!("0-3".parse::<LayerSet>().is_err());
        assert!("4-2".parse::<LayerSet>().is_err());
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        let err = RunConfig::parse("[adaptation]\nsharng = share_down\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `sharng`"), "{err}");
        let err = RunConfig::parse("[adaptor]\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
        let err = RunConfig::parse("variant = lora\n").unwrap_err();
        assert!(err.to_string().contains("before any section"), "{err}");
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "# desk run\n[backbone]\nhidden = 32\nheads = 2\n\n[adaptation]\nvariant = uniadapter\nsharing = share_up\nfusion_layers = 1-2\n[task]\nkind = vqa\nseed = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.backbone.hidden, 32);
        assert_eq!(cfg.adaptation.sharing, Sharing::ShareUp);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.model_hash(), again.model_hash());
    }

    #[test]
    fn validation_rejects_inconsistent_settings() {
        let mut cfg = RunConfig::default();
        cfg.adaptation.variant = Variant::ParallelAdapter;
        assert!(cfg.validate().is_err(), "sharing on a non-uniadapter variant");
        cfg.adaptation.sharing = Sharing::NoShare;
        cfg.validate().unwrap();
        cfg.adaptation.modalities = "V,C".parse().unwrap();
        assert!(cfg.validate().is_err(), "query residual without T");
        cfg.adaptation.query_residual = false;
        cfg.validate().unwrap();
        cfg.adaptation.visual_layers = LayerSet::one_based(1, 5);
        assert!(cfg.validate().is_err(), "layer 5 of a 4-deep encoder");
        let mut cfg = RunConfig::default();
        cfg.backbone.heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.optimizer.lr = 0.0;
        assert!(cfg.validate().is_err());
    }
}
