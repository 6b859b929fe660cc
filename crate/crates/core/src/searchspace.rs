//! The space of classification heads: types, validation, uniform sampling,
//! the normalized vector encoding used by the surrogate, and counting.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MLP_LAYERS: (u32, u32) = (1, 5);
pub const MLP_HIDDEN: (u32, u32) = (5, 200);
pub const CONV_HEADS: (u32, u32) = (5, 200);
pub const CONV_KERNELS: [u32; 5] = [3, 5, 7, 9, 11];
pub const CONV_LAYERS: (u32, u32) = (1, 5);
pub const ENCODER_HEADS: (u32, u32) = (1, 16);
pub const ENCODER_LAYERS: (u32, u32) = (1, 5);

/// Number of dimensions of a [`ConfigVector`].
pub const VECTOR_DIMS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Max,
    Mean,
    Cls,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 3] = [PoolingKind::Max, PoolingKind::Mean, PoolingKind::Cls];

    pub fn index(self) -> usize {
        match self {
            PoolingKind::Max => 0,
            PoolingKind::Mean => 1,
            PoolingKind::Cls => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Max => "max",
            PoolingKind::Mean => "mean",
            PoolingKind::Cls => "cls",
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layers: u32,
    /// Width of every hidden layer; absent when `layers == 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<u32>,
}

impl MlpSpec {
    pub fn single() -> Self {
        Self {
            layers: 1,
            hidden: None,
        }
    }

    pub fn deep(layers: u32, hidden: u32) -> Self {
        Self {
            layers,
            hidden: Some(hidden),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub enabled: bool,
    /// Output channels (filters) of every conv layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<bool>,
}

impl ConvSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            heads: None,
            kernel: None,
            layers: None,
            skip: None,
        }
    }

    pub fn new(heads: u32, kernel: u32, layers: u32, skip: bool) -> Self {
        Self {
            enabled: true,
            heads: Some(heads),
            kernel: Some(kernel),
            layers: Some(layers),
            skip: Some(skip),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<u32>,
}

impl EncoderSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            heads: None,
            layers: None,
        }
    }

    pub fn new(heads: u32, layers: u32) -> Self {
        Self {
            enabled: true,
            heads: Some(heads),
            layers: Some(layers),
        }
    }
}

/// One point of the search space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub pooling: PoolingKind,
    pub freeze_base: bool,
    pub mlp: MlpSpec,
    pub conv: ConvSpec,
    pub encoder: EncoderSpec,
}

/// One broken constraint, naming the field and the bound.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
}

impl Violation {
    fn new(field: &str, constraint: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            constraint: constraint.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

fn check_range(out: &mut Vec<Violation>, field: &str, v: Option<u32>, (lo, hi): (u32, u32)) {
    match v {
        None => out.push(Violation::new(field, "missing while parent is enabled")),
        Some(x) if x < lo || x > hi => {
            out.push(Violation::new(field, format!("{x} outside {lo}..={hi}")))
        }
        Some(_) => {}
    }
}

fn check_absent<T: fmt::Debug>(out: &mut Vec<Violation>, field: &str, v: Option<T>, why: &str) {
    if let Some(x) = v {
        out.push(Violation::new(field, format!("set to {x:?} while {why}")));
    }
}

impl HeadConfig {
    /// Channel width the encoder stack operates at.
    pub fn model_dim(&self, base_dim: usize) -> usize {
        match (self.conv.enabled, self.conv.heads) {
            (true, Some(h)) => h as usize,
            _ => base_dim,
        }
    }

    /// Every broken range or consistency constraint; empty when valid.
    pub fn violations(&self, base_dim: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        if base_dim == 0 {
            out.push(Violation::new("base_dim", "must be positive"));
        }
        let (lo, hi) = MLP_LAYERS;
        if self.mlp.layers < lo || self.mlp.layers > hi {
            out.push(Violation::new(
                "mlp.layers",
                format!("{} outside {lo}..={hi}", self.mlp.layers),
            ));
        }
        if self.mlp.layers > 1 {
            check_range(&mut out, "mlp.hidden", self.mlp.hidden, MLP_HIDDEN);
        } else {
            check_absent(&mut out, "mlp.hidden", self.mlp.hidden, "mlp.layers = 1");
        }

        if self.conv.enabled {
            check_range(&mut out, "conv.heads", self.conv.heads, CONV_HEADS);
            match self.conv.kernel {
                None => out.push(Violation::new("conv.kernel", "missing while parent is enabled")),
                Some(k) if !CONV_KERNELS.contains(&k) => out.push(Violation::new(
                    "conv.kernel",
                    format!("{k} not in {CONV_KERNELS:?}"),
                )),
                Some(_) => {}
            }
            check_range(&mut out, "conv.layers", self.conv.layers, CONV_LAYERS);
            if self.conv.skip.is_none() {
                out.push(Violation::new("conv.skip", "missing while parent is enabled"));
            }
        } else {
            let why = "conv is disabled";
            check_absent(&mut out, "conv.heads", self.conv.heads, why);
            check_absent(&mut out, "conv.kernel", self.conv.kernel, why);
            check_absent(&mut out, "conv.layers", self.conv.layers, why);
            check_absent(&mut out, "conv.skip", self.conv.skip, why);
        }

        if self.encoder.enabled {
            check_range(&mut out, "encoder.heads", self.encoder.heads, ENCODER_HEADS);
            check_range(&mut out, "encoder.layers", self.encoder.layers, ENCODER_LAYERS);
            if let Some(h) = self.encoder.heads.filter(|&h| h > 0) {
                let dim = self.model_dim(base_dim);
                if dim > 0 && !dim.is_multiple_of(h as usize) {
                    out.push(Violation::new(
                        "encoder.heads",
                        format!("{h} does not divide model dimension {dim}"),
                    ));
                }
            }
        } else {
            let why = "encoder is disabled";
            check_absent(&mut out, "encoder.heads", self.encoder.heads, why);
            check_absent(&mut out, "encoder.layers", self.encoder.layers, why);
        }
        out
    }

    pub fn is_valid(&self, base_dim: usize) -> bool {
        self.violations(base_dim).is_empty()
    }
}

/// `Ok(())` or the full list of broken constraints.
pub fn validate(config: &HeadConfig, base_dim: usize) -> Result<()> {
    let v = config.violations(base_dim);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(v))
    }
}

/// Single dense layer over [CLS] with the base unfrozen.
pub fn baseline_config() -> HeadConfig {
    HeadConfig {
        pooling: PoolingKind::Cls,
        freeze_base: false,
        mlp: MlpSpec::single(),
        conv: ConvSpec::disabled(),
        encoder: EncoderSpec::disabled(),
    }
}

/// Attention head counts in range that divide `dim`.
pub fn valid_encoder_heads(dim: usize) -> Vec<u32> {
    (ENCODER_HEADS.0..=ENCODER_HEADS.1)
        .filter(|&h| dim.is_multiple_of(h as usize))
        .collect()
}

/// Uniform draw over the listed options. Conditional fields are drawn only
/// when their parent flag is on; encoder heads are drawn among the divisors
/// of the dimension the encoder stack will see.
pub fn sample_uniform(rng: &mut impl Rng, base_dim: usize) -> HeadConfig {
    let pooling = PoolingKind::ALL[rng.random_range(0..3)];
    let freeze_base = rng.random_bool(0.5);
    let layers = rng.random_range(MLP_LAYERS.0..=MLP_LAYERS.1);
    let mlp = if layers == 1 {
        MlpSpec::single()
    } else {
        MlpSpec::deep(layers, rng.random_range(MLP_HIDDEN.0..=MLP_HIDDEN.1))
    };
    let conv = if rng.random_bool(0.5) {
        ConvSpec::new(
            rng.random_range(CONV_HEADS.0..=CONV_HEADS.1),
            *CONV_KERNELS.choose(rng).expect("non-empty"),
            rng.random_range(CONV_LAYERS.0..=CONV_LAYERS.1),
            rng.random_bool(0.5),
        )
    } else {
        ConvSpec::disabled()
    };
    let encoder = if rng.random_bool(0.5) {
        let dim = match conv.heads {
            Some(h) => h as usize,
            None => base_dim,
        };
        let heads = *valid_encoder_heads(dim).choose(rng).expect("1 always divides");
        EncoderSpec::new(heads, rng.random_range(ENCODER_LAYERS.0..=ENCODER_LAYERS.1))
    } else {
        EncoderSpec::disabled()
    };
    HeadConfig {
        pooling,
        freeze_base,
        mlp,
        conv,
        encoder,
    }
}

/// Snaps encoder heads to the nearest divisor of the model dimension
/// (ties go to the smaller count). Other fields are left alone.
pub fn repair(mut config: HeadConfig, base_dim: usize) -> HeadConfig {
    if let (true, Some(h)) = (config.encoder.enabled, config.encoder.heads) {
        let dim = config.model_dim(base_dim);
        if dim > 0 && !dim.is_multiple_of(h as usize) {
            let best = valid_encoder_heads(dim)
                .into_iter()
                .min_by_key(|&c| (c.abs_diff(h), c))
                .expect("1 always divides");
            config.encoder.heads = Some(best);
        }
    }
    config
}

/// Normalized encoding with an activity mask for conditional dimensions.
///
/// Dimension order: pooling, freeze, mlp.layers, mlp.hidden, conv.enabled,
/// conv.heads, conv.kernel, conv.layers, conv.skip, encoder.enabled,
/// encoder.heads, encoder.layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfigVector {
    pub values: [f64; VECTOR_DIMS],
    pub active: [bool; VECTOR_DIMS],
}

/// Value carried by inactive dimensions.
pub const INACTIVE_VALUE: f64 = 0.5;

/// Kind of each vector dimension, as the surrogate sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimKind {
    /// Categorical with `n` options encoded at bin centers.
    Categorical(usize),
    /// Integer or ordinal mapped linearly onto `[0, 1]`.
    Numeric,
}

pub const DIM_KINDS: [DimKind; VECTOR_DIMS] = [
    DimKind::Categorical(3),
    DimKind::Categorical(2),
    DimKind::Numeric,
    DimKind::Numeric,
    DimKind::Categorical(2),
    DimKind::Numeric,
    DimKind::Numeric,
    DimKind::Numeric,
    DimKind::Categorical(2),
    DimKind::Categorical(2),
    DimKind::Numeric,
    DimKind::Numeric,
];

fn enc_bool(b: bool) -> f64 {
    if b {
        0.75
    } else {
        0.25
    }
}

fn dec_bool(v: f64) -> bool {
    v >= 0.5
}

fn enc_int(x: u32, (lo, hi): (u32, u32)) -> f64 {
    (x - lo) as f64 / (hi - lo) as f64
}

fn dec_int(v: f64, (lo, hi): (u32, u32)) -> u32 {
    let x = (lo as f64 + v.clamp(0.0, 1.0) * (hi - lo) as f64).round();
    (x as u32).clamp(lo, hi)
}

fn enc_kernel(k: u32) -> f64 {
    enc_int(k, (CONV_KERNELS[0], CONV_KERNELS[4]))
}

/// Nearest odd width in the kernel set; exact ties go to the wider kernel.
fn dec_kernel(v: f64) -> u32 {
    let lo = CONV_KERNELS[0] as f64;
    let x = lo + v.clamp(0.0, 1.0) * (CONV_KERNELS[4] - CONV_KERNELS[0]) as f64;
    let idx = ((x - lo) / 2.0).round() as usize;
    CONV_KERNELS[idx.min(CONV_KERNELS.len() - 1)]
}

pub fn encode(config: &HeadConfig) -> ConfigVector {
    let mut values = [INACTIVE_VALUE; VECTOR_DIMS];
    let mut active = [false; VECTOR_DIMS];
    let mut set = |i: usize, v: f64| {
        values[i] = v;
        active[i] = true;
    };
    set(0, (config.pooling.index() as f64 + 0.5) / 3.0);
    set(1, enc_bool(config.freeze_base));
    set(2, enc_int(config.mlp.layers, MLP_LAYERS));
    if let (true, Some(h)) = (config.mlp.layers > 1, config.mlp.hidden) {
        set(3, enc_int(h, MLP_HIDDEN));
    }
    set(4, enc_bool(config.conv.enabled));
    if config.conv.enabled {
        if let Some(h) = config.conv.heads {
            set(5, enc_int(h, CONV_HEADS));
        }
        if let Some(k) = config.conv.kernel {
            set(6, enc_kernel(k));
        }
        if let Some(l) = config.conv.layers {
            set(7, enc_int(l, CONV_LAYERS));
        }
        if let Some(s) = config.conv.skip {
            set(8, enc_bool(s));
        }
    }
    set(9, enc_bool(config.encoder.enabled));
    if config.encoder.enabled {
        if let Some(h) = config.encoder.heads {
            set(10, enc_int(h, ENCODER_HEADS));
        }
        if let Some(l) = config.encoder.layers {
            set(11, enc_int(l, ENCODER_LAYERS));
        }
    }
    ConfigVector { values, active }
}

/// Inverse of [`encode`]. Activity is re-derived from the decoded parent
/// flags, so the mask of the input is not consulted.
pub fn decode(vector: &ConfigVector) -> HeadConfig {
    let v = &vector.values;
    let pooling = PoolingKind::ALL[((v[0].clamp(0.0, 1.0) * 3.0) as usize).min(2)];
    let layers = dec_int(v[2], MLP_LAYERS);
    let mlp = if layers == 1 {
        MlpSpec::single()
    } else {
        MlpSpec::deep(layers, dec_int(v[3], MLP_HIDDEN))
    };
    let conv = if dec_bool(v[4]) {
        ConvSpec::new(
            dec_int(v[5], CONV_HEADS),
            dec_kernel(v[6]),
            dec_int(v[7], CONV_LAYERS),
            dec_bool(v[8]),
        )
    } else {
        ConvSpec::disabled()
    };
    let encoder = if dec_bool(v[9]) {
        EncoderSpec::new(dec_int(v[10], ENCODER_HEADS), dec_int(v[11], ENCODER_LAYERS))
    } else {
        EncoderSpec::disabled()
    };
    HeadConfig {
        pooling,
        freeze_base: dec_bool(v[1]),
        mlp,
        conv,
        encoder,
    }
}

/// Whether an optional block may be absent, is always present, or never.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Presence {
    Optional,
    Always,
    Never,
}

impl Presence {
    fn count(self, enabled_variants: u64) -> u64 {
        match self {
            Presence::Optional => 1 + enabled_variants,
            Presence::Always => enabled_variants,
            Presence::Never => 1,
        }
    }
}

/// Discretization used to count the space. Widths (MLP hidden, conv
/// heads) are counted in `width_bins` bins; every layer count is counted
/// with every width bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountingConvention {
    pub pooling: u64,
    pub freeze: u64,
    pub mlp_layers: u64,
    pub width_bins: u64,
    pub conv: Presence,
    pub kernels: u64,
    pub conv_layers: u64,
    pub skip: u64,
    pub encoder: Presence,
    pub encoder_heads: u64,
    pub encoder_layers: u64,
}

impl Default for CountingConvention {
    fn default() -> Self {
        Self {
            pooling: 3,
            freeze: 2,
            mlp_layers: 5,
            width_bins: 10,
            conv: Presence::Optional,
            kernels: CONV_KERNELS.len() as u64,
            conv_layers: 5,
            skip: 2,
            encoder: Presence::Optional,
            encoder_heads: 16,
            encoder_layers: 5,
        }
    }
}

impl CountingConvention {
    pub fn count(&self) -> u64 {
        let mlp = self.mlp_layers * self.width_bins;
        let conv = self
            .conv
            .count(self.width_bins * self.kernels * self.conv_layers * self.skip);
        let encoder = self.encoder.count(self.encoder_heads * self.encoder_layers);
        self.pooling * self.freeze * mlp * conv * encoder
    }
}

/// Size of the discretized space under the default convention.
pub fn cardinality() -> u64 {
    CountingConvention::default().count()
}

/// One column of an architecture table: the row schema used by reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureColumn {
    pub pooling: PoolingKind,
    pub linear_layers: u32,
    pub hidden: Option<u32>,
    /// Zero means no conv block.
    pub conv_layers: u32,
    pub conv_heads: Option<u32>,
    pub kernel: Option<u32>,
    pub skip: Option<bool>,
    /// Zero means no encoder block.
    pub attention_layers: u32,
    pub attention_heads: Option<u32>,
}

/// A field changed while turning a table column into a valid config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjustment {
    pub field: String,
    pub from: u32,
    pub to: u32,
}

impl ArchitectureColumn {
    pub fn from_config(c: &HeadConfig) -> Self {
        let conv_on = c.conv.enabled;
        let enc_on = c.encoder.enabled;
        Self {
            pooling: c.pooling,
            linear_layers: c.mlp.layers,
            hidden: if c.mlp.layers > 1 { c.mlp.hidden } else { None },
            conv_layers: if conv_on { c.conv.layers.unwrap_or(0) } else { 0 },
            conv_heads: c.conv.heads.filter(|_| conv_on),
            kernel: c.conv.kernel.filter(|_| conv_on),
            skip: c.conv.skip.filter(|_| conv_on),
            attention_layers: if enc_on { c.encoder.layers.unwrap_or(0) } else { 0 },
            attention_heads: c.encoder.heads.filter(|_| enc_on),
        }
    }

    /// Builds a config, resolving attention heads that do not divide the
    /// encoder's input width. With a conv stack the conv width moves to the
    /// nearest in-range multiple of the head count (ties upward); without
    /// one the head count moves to the nearest divisor of `base_dim`.
    pub fn to_config(&self, freeze_base: bool, base_dim: usize) -> Result<(HeadConfig, Vec<Adjustment>)> {
        let mlp = if self.linear_layers > 1 {
            MlpSpec {
                layers: self.linear_layers,
                hidden: self.hidden,
            }
        } else {
            MlpSpec {
                layers: self.linear_layers,
                hidden: None,
            }
        };
        let mut conv = if self.conv_layers > 0 {
            ConvSpec {
                enabled: true,
                heads: self.conv_heads,
                kernel: self.kernel,
                layers: Some(self.conv_layers),
                skip: self.skip,
            }
        } else {
            ConvSpec::disabled()
        };
        let mut encoder = if self.attention_layers > 0 {
            EncoderSpec {
                enabled: true,
                heads: self.attention_heads,
                layers: Some(self.attention_layers),
            }
        } else {
            EncoderSpec::disabled()
        };
        let mut adjustments = Vec::new();
        if let Some(h) = encoder.heads.filter(|&h| h > 0 && encoder.enabled) {
            match conv.heads.filter(|_| conv.enabled) {
                Some(width) if width % h != 0 => {
                    let to = (CONV_HEADS.0..=CONV_HEADS.1)
                        .filter(|c| c % h == 0)
                        .min_by_key(|&c| (c.abs_diff(width), std::cmp::Reverse(c)))
                        .expect("head counts are at most 16");
                    conv.heads = Some(to);
                    adjustments.push(Adjustment {
                        field: "conv.heads".into(),
                        from: width,
                        to,
                    });
                }
                None if !base_dim.is_multiple_of(h as usize) => {
                    let fixed = repair(
                        HeadConfig {
                            pooling: self.pooling,
                            freeze_base,
                            mlp,
                            conv,
                            encoder,
                        },
                        base_dim,
                    );
                    let to = fixed.encoder.heads.expect("enabled encoder keeps heads");
                    encoder.heads = Some(to);
                    adjustments.push(Adjustment {
                        field: "encoder.heads".into(),
                        from: h,
                        to,
                    });
                }
                _ => {}
            }
        }
        let config = HeadConfig {
            pooling: self.pooling,
            freeze_base,
            mlp,
            conv,
            encoder,
        };
        validate(&config, base_dim)?;
        Ok((config, adjustments))
    }
}
